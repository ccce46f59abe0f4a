"""Alignment and task metrics, ablation sweeps and overlay renders."""

import csv
import io
import json
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import pgm
from .errors import DimensionError, DivergenceError, DomainError, GeometryError
from .gaze import AggregationConfig, Heatmap
from .model import ModelConfig, kl_regularizer, predict, train
from .numerics import DTYPE, RngState
from .pipeline import PreprocessConfig, build_batch, sample_targets
from .synth import generate_suite

log = logging.getLogger(__name__)

ABLATION_HEADER = ("variant", "seed", "accuracy", "mean_overlap", "mean_kl")
AXES = ("lambda", "mode", "points")


def topk_indices(p, k):
    """Indices of the ``k`` largest entries; ties go to the lower index."""
    return np.argsort(-np.asarray(p, dtype=DTYPE), kind="stable")[:k]


def topk_overlap(attn, target, k=10):
    """Share of the top-``k`` attended patches that are also top-``k`` in ``target``."""
    attn = np.asarray(getattr(attn, "probs", attn), dtype=DTYPE).ravel()
    target = np.asarray(getattr(target, "probs", target), dtype=DTYPE).ravel()
    if attn.shape != target.shape:
        raise DimensionError(f"attention has {attn.size} patches, target has {target.size}")
    if not 1 <= k <= attn.size:
        raise DomainError(f"k={k} must lie in [1, {attn.size}]")
    common = np.intersect1d(topk_indices(attn, k), topk_indices(target, k))
    return len(common) / k


@dataclass
class OverlapReport:
    k: int
    per_frame: np.ndarray  # (n_samples, n_frames)
    mean: float
    n_frames: int

    def to_json(self):
        return {"k": self.k, "mean": self.mean, "n_frames": self.n_frames, "per_frame": self.per_frame.tolist()}


@dataclass
class AblationResult:
    variant: str
    seed: int
    accuracy: float
    mean_kl: float
    mean_overlap: float
    status: str = "ok"
    error: str = ""
    log: list = field(default_factory=list, repr=False)

    def row(self):
        return [self.variant, self.seed, self.accuracy, self.mean_overlap, self.mean_kl]


def overlap_report(attention, targets, k=10):
    """Per-frame top-``k`` overlap for attention and targets of shape ``(B, T, P)``."""
    attention = np.asarray(attention, dtype=DTYPE)
    targets = np.asarray(targets, dtype=DTYPE)
    if attention.shape != targets.shape:
        raise DimensionError(f"attention {attention.shape} and targets {targets.shape} differ")
    per = np.array([[topk_overlap(a, t, k) for a, t in zip(ra, rt)] for ra, rt in zip(attention, targets)])
    per = per.reshape(attention.shape[:2])
    return OverlapReport(k, per, float(per.mean()), int(per.size))


def evaluate(params, cfg, dataset, k=10, attention=None):
    """``(accuracy, OverlapReport, mean KL)`` of a model on a :class:`Batch`.

    The KL figure is the per-clip sum over frames, averaged over clips, which
    is the quantity the training loss weights by lambda. ``attention``
    overrides the model's own attention maps (for oracle checks); the
    predictions still come from the model.
    """
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    attn, preds = predict(params, cfg, dataset.frames)
    if attention is not None:
        attn = np.asarray(attention, dtype=DTYPE)
    accuracy = float(np.mean(preds == dataset.labels))
    report = overlap_report(attn, dataset.targets, k)
    kl = np.mean([kl_regularizer(a, t, cfg.kl_floor) for a, t in zip(attn, dataset.targets)])
    return accuracy, report, float(kl)


# -- ablations ---------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    """One cell of an ablation axis: a label plus the settings it changes."""

    label: str
    lam: float = None
    mode: str = None
    points: int = None

    def apply(self, model_cfg, prep_cfg):
        if self.lam is not None:
            model_cfg = replace(model_cfg, lam=self.lam)
        if self.mode is not None:
            prep_cfg = replace(prep_cfg, mode=self.mode)
        if self.points is not None:
            agg = prep_cfg.aggregation
            # keep the sampling density of the base window when adding points
            window = max(agg.window_ms, math.ceil(agg.window_ms * self.points / agg.max_points))
            prep_cfg = replace(prep_cfg, aggregation=AggregationConfig(window, self.points))
        return model_cfg, prep_cfg


def parse_variants(text):
    """Parse ``lambda=0,100,1000``, ``mode=singular,aggregated`` or ``points=6,12``.

    The Greek ``λ`` is accepted for ``lambda``.
    """
    if "=" not in text:
        raise DomainError(f"variant spec {text!r} must look like axis=v1,v2")
    axis, _, values = text.partition("=")
    axis = {"λ": "lambda", "lam": "lambda"}.get(axis.strip(), axis.strip())
    items = [v.strip() for v in values.split(",") if v.strip()]
    if axis not in AXES or not items:
        raise DomainError(f"unknown or empty ablation axis {text!r}")
    out = []
    for v in items:
        try:
            if axis == "lambda":
                out.append(Variant(f"lambda={v}", lam=float(v)))
            elif axis == "points":
                out.append(Variant(f"points={v}", points=int(v)))
            else:
                if v not in ("singular", "aggregated"):
                    raise DomainError(f"unknown mode {v!r}")
                out.append(Variant(f"mode={v}", mode=v))
        except ValueError as exc:
            raise DomainError(f"bad value {v!r} for axis {axis}: {exc}") from None
    return out


def suite_seeds(seed):
    """Train and test suite seeds for one ablation seed."""
    root = RngState(seed)
    return root.child("train").seed, root.child("test").seed


def run_ablation(spec, variants, seeds, model_cfg=None, prep_cfg=None, eval_cfg=None,
                 n_train=200, n_test=100, k=10, out_dir=None, min_variants=2, min_seeds=3):
    """Train and evaluate every ``(variant, seed)`` cell.

    Each seed draws its own train and test suites, shared by all variants so
    that they are compared on identical clips. Test targets always come from
    ``eval_cfg`` (the base preprocessing by default), so overlap is measured
    against the same reference whatever the training targets were. A cell
    that diverges is recorded with NaN metrics and the sweep continues.
    """
    variants = list(variants)
    seeds = list(seeds)
    if len(variants) < min_variants or len(seeds) < min_seeds:
        raise DomainError(f"need at least {min_variants} variants and {min_seeds} seeds")
    model_cfg = model_cfg or ModelConfig(n_classes=spec.n_classes)
    prep_cfg = prep_cfg or PreprocessConfig()
    eval_cfg = eval_cfg or prep_cfg
    results = []
    for seed in seeds:
        train_seed, test_seed = suite_seeds(seed)
        train_clips = generate_suite(spec, n_train, train_seed)
        test_clips = generate_suite(spec, n_test, test_seed)
        test = build_batch(test_clips, [sample_targets(c, eval_cfg) for c in test_clips], spec.task)
        cache = {}
        for variant in variants:
            mcfg, pcfg = variant.apply(replace(model_cfg, seed=seed), prep_cfg)
            if pcfg not in cache:
                cache[pcfg] = build_batch(train_clips, [sample_targets(c, pcfg) for c in train_clips], spec.task)
            try:
                params, history = train(cache[pcfg], mcfg)
            except DivergenceError as exc:
                log.warning("%s seed %s diverged: %s", variant.label, seed, exc)
                results.append(AblationResult(variant.label, seed, math.nan, math.nan, math.nan, "diverged", str(exc)))
                continue
            acc, report, kl = evaluate(params, mcfg, test, k)
            results.append(AblationResult(variant.label, seed, acc, kl, report.mean, log=history))
    if out_dir is not None:
        write_ablation(results, out_dir)
    return results


def ablation_csv(results):
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_HEADER)
    for r in results:
        writer.writerow([r.variant, r.seed] + [repr(float(x)) for x in r.row()[2:]])
    return buf.getvalue()


def write_ablation(results, out_dir, extra=None):
    """Persist ``ablation.csv``, ``ablation.json`` and per-cell training logs."""
    os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
        fh.write(ablation_csv(results))
    cells = []
    for r in results:
        cell = {k: v for k, v in asdict(r).items() if k != "log"}
        cells.append({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in cell.items()})
        name = re.sub(r"[^A-Za-z0-9.-]+", "_", r.variant) + f"_seed{r.seed}.jsonl"
        with open(os.path.join(out_dir, "logs", name), "w") as fh:
            fh.writelines(json.dumps(rec, sort_keys=True) + "\n" for rec in r.log)
    doc = {"results": cells, **(extra or {})}
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def summarize(results):
    """Seed-averaged ``(accuracy, mean_overlap, mean_kl)`` per variant, in first-seen order."""
    out = {}
    for r in results:
        out.setdefault(r.variant, []).append((r.accuracy, r.mean_overlap, r.mean_kl))
    return {v: tuple(float(x) for x in np.mean(rows, axis=0)) for v, rows in out.items()}


# -- rendering ---------------------------------------------------------------


def _overlay_pixels(overlay, height, width):
    if isinstance(overlay, Heatmap):
        overlay = overlay.mass
    ov = np.asarray(getattr(overlay, "probs", overlay), dtype=DTYPE)
    if ov.ndim == 1:
        side = math.sqrt(height * width / ov.size) if ov.size else 0
        px = int(round(side))
        if px < 1 or px * px * ov.size != height * width or height % px or width % px:
            raise GeometryError(f"{ov.size} patches do not tile a {width}x{height} frame")
        ov = ov.reshape(height // px, width // px)
    if ov.ndim != 2:
        raise GeometryError(f"overlay must be 1-D or 2-D, got shape {ov.shape}")
    if ov.shape == (height, width):
        return ov
    fy, ry = divmod(height, ov.shape[0])
    fx, rx = divmod(width, ov.shape[1])
    if ry or rx or fy != fx or fy < 1:
        raise GeometryError(f"overlay {ov.shape} does not tile a {width}x{height} frame")
    return np.repeat(np.repeat(ov, fy, axis=0), fx, axis=1)


def render_heatmap_pgm(frame, overlay):
    """Blend a ``[0, 1]`` frame 50/50 with an overlay scaled to its maximum.

    ``overlay`` may be a :class:`Heatmap`, a pixel map of the frame's size,
    a patch grid, or a flat row-major patch vector; patch overlays are
    upsampled by repetition.
    """
    frame = np.asarray(frame, dtype=DTYPE)
    if frame.ndim != 2:
        raise GeometryError(f"frame must be 2-D, got shape {frame.shape}")
    ov = _overlay_pixels(overlay, *frame.shape)
    peak = ov.max() if ov.size else 0.0
    scaled = ov / peak if peak > 0 else np.zeros_like(ov)
    return pgm.to_bytes(0.5 * np.clip(frame, 0, 1) + 0.5 * scaled)
