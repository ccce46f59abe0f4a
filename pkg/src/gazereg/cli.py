"""``gazereg`` command line: synth, preprocess, train, eval, ablate, render.

Exit codes: 0 success, 2 input or IO error, 3 training divergence,
4 model/target configuration mismatch.
"""

import argparse
import itertools
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import pgm
from .config import RunConfig, digest
from .errors import DivergenceError, GazeRegError
from .flow import OcclusionConfig, read_flo
from .gaze import (
    AggregationConfig,
    Heatmap,
    SmoothingConfig,
    format_patch_rows,
    heatmap_from_bytes,
    heatmap_to_bytes,
    parse_gaze_csv,
    parse_patch_rows,
)
from .metrics import Variant, evaluate, parse_variants, render_heatmap_pgm, run_ablation, summarize, write_ablation
from .model import Batch, load_checkpoint, predict, save_checkpoint, train
from .pipeline import frame_target
from .synth import generate_suite, save_sample

log = logging.getLogger("gazereg")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


# -- small IO helpers ----------------------------------------------------------


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from None


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None


def _run_config(path):
    return RunConfig.load(_read_json(path)) if path else RunConfig()


def _load_dataset(data_dir):
    manifest = _read_json(os.path.join(data_dir, "manifest.json"))
    try:
        return manifest, RunConfig.from_json(manifest["config"])
    except KeyError:
        raise CliError(f"{data_dir}/manifest.json lacks a config section") from None


def _sample_frames(sample_dir, n_frames):
    frames = []
    for i in range(n_frames):
        frames.append(pgm.from_bytes(_read_bytes(os.path.join(sample_dir, "frames", f"{i}.pgm"))))
    return np.stack(frames)


def _labels(data_dir, ids, task):
    key = "future_label" if task == "predict" else "label"
    return np.array([_read_json(os.path.join(data_dir, sid, "truth.json"))[key] for sid in ids])


def _load_targets(targets_dir, ids, n_frames):
    meta = _read_json(os.path.join(targets_dir, "targets.json"))
    if meta.get("samples") != list(ids):
        raise CliError("targets do not list the same samples as the dataset")
    rows = []
    for sid in ids:
        with open(os.path.join(targets_dir, sid, "targets.csv"), encoding="utf-8") as fh:
            per = parse_patch_rows(fh.read())
        if len(per) != n_frames:
            raise CliError(f"{sid}: {len(per)} target rows for {n_frames} frames")
        rows.append(np.stack([d.probs for _, d in per]))
    return meta, np.stack(rows) if rows else np.zeros((0, n_frames, 0))


def _dataset_batch(data_dir, targets_dir):
    manifest, run = _load_dataset(data_dir)
    ids = manifest["samples"]
    if not ids:
        raise CliError(f"{data_dir} holds no samples")
    n_frames = run.scene.n_frames
    meta, targets = _load_targets(targets_dir, ids, n_frames)
    frames = np.stack([_sample_frames(os.path.join(data_dir, sid), n_frames) for sid in ids])
    batch = Batch(frames, targets, _labels(data_dir, ids, run.scene.task), run.scene.task)
    return manifest, run, meta, batch


# -- commands ------------------------------------------------------------------


def cmd_synth(args):
    run = _run_config(args.spec)
    if args.count < 0:
        raise CliError("--count must be nonnegative")
    os.makedirs(args.out, exist_ok=True)
    ids = [f"sample_{k:05d}" for k in range(args.count)]
    for sid, sample in zip(ids, generate_suite(run.scene, args.count, args.seed)):
        save_sample(sample, os.path.join(args.out, sid))
    _write_json(os.path.join(args.out, "manifest.json"), {
        "samples": ids,
        "count": args.count,
        "seed": args.seed,
        "config": run.to_json(),
        "config_hash": run.content_hash(),
    })
    log.info("wrote %d samples to %s", args.count, args.out)


def _flow_lookup(sample_dir):
    cache = {}

    def lookup(a_ms, b_ms):
        if (a_ms, b_ms) not in cache:
            path = os.path.join(sample_dir, "flow", f"{a_ms}_{b_ms}.flo")
            cache[(a_ms, b_ms)] = read_flo(_read_bytes(path)) if os.path.exists(path) else None
        return cache[(a_ms, b_ms)]

    return lookup


def cmd_preprocess(args):
    manifest, data_run = _load_dataset(args.data)
    run = _run_config(args.config)
    run = replace(
        run,
        scene=data_run.scene,
        smoothing=SmoothingConfig(args.sigma),
        aggregation=AggregationConfig(args.window_ms, args.max_points),
        occlusion=OcclusionConfig(args.eps, args.eta),
        patch_px=args.patch,
        mode=args.mode,
    )
    cfg = run.preprocess()
    spec = data_run.scene
    os.makedirs(args.out, exist_ok=True)
    substitutions = []
    for sid in manifest["samples"]:
        src = os.path.join(args.data, sid)
        with open(os.path.join(src, "gaze.csv"), encoding="utf-8") as fh:
            trace = parse_gaze_csv(fh.read(), spec.width, spec.height)
        lookup = _flow_lookup(src)
        dst = os.path.join(args.out, sid)
        os.makedirs(os.path.join(dst, "heatmaps"), exist_ok=True)
        rows, occ = [], ["frame_id,tau_ms,observed_ratio,verdict"]
        for i in range(spec.n_frames):
            ft = frame_target(trace, spec.frame_time_ms(i), spec.width, spec.height, lookup, cfg, frame=i)
            heat = ft.heatmap
            if ft.fallback:
                substitutions.append({"sample": sid, "frame": i})
                log.warning("%s frame %d: no gaze, using a uniform target", sid, i)
                heat = Heatmap(np.full((spec.height, spec.width), 1.0 / (spec.width * spec.height)))
            with open(os.path.join(dst, "heatmaps", f"{i}.gzhm"), "wb") as fh:
                fh.write(heatmap_to_bytes(heat))
            rows.append((i, ft.dist))
            for tau, ratio, verdict in ft.checks:
                occ.append(f"{i},{tau},{'' if ratio is None else repr(ratio)},{verdict}")
        with open(os.path.join(dst, "targets.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_patch_rows(rows))
        with open(os.path.join(dst, "occlusion.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(occ) + "\n")
    _write_json(os.path.join(args.out, "targets.json"), {
        "samples": manifest["samples"],
        "config": run.to_json(),
        "config_hash": run.content_hash(),
        "preprocess_hash": run.preprocess_hash(),
        "data_hash": manifest["config_hash"],
        "substitutions": substitutions,
    })


def cmd_train(args):
    manifest, data_run, meta, batch = _dataset_batch(args.data, args.targets)
    run = RunConfig.from_json(meta["config"])
    model_cfg = replace(run.model, lam=args.lam, epochs=args.epochs, lr=args.lr, seed=args.seed,
                        batch=args.batch, n_classes=data_run.scene.n_classes, patch_px=run.patch_px)
    run = replace(run, scene=data_run.scene, model=model_cfg)
    log_path = args.log or args.out + ".log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        try:
            params, _ = train(batch, model_cfg, on_epoch=on_epoch)
        except DivergenceError as exc:
            raise CliError(f"training diverged: {exc}; last finite epoch {exc.last_finite_epoch}", EXIT_DIVERGED) from None
    checkpoint = save_checkpoint(params, model_cfg, {
        "config": run.to_json(),
        "config_hash": run.content_hash(),
        "preprocess_hash": meta["preprocess_hash"],
        "data_hash": manifest["config_hash"],
    })
    with open(args.out, "wb") as fh:
        fh.write(checkpoint)


def _load_model(path):
    try:
        return load_checkpoint(_read_bytes(path))
    except GazeRegError as exc:
        raise CliError(f"cannot load model {path}: {exc}") from None


def cmd_eval(args):
    params, cfg, meta = _load_model(args.model)
    _, _, tmeta, batch = _dataset_batch(args.data, args.targets)
    if meta.get("preprocess_hash") != tmeta.get("preprocess_hash"):
        raise CliError("model was trained on targets built with a different configuration", EXIT_MISMATCH)
    attention = batch.targets if args.oracle_attention else None
    acc, report, kl = evaluate(params, cfg, batch, args.topk, attention=attention)
    _write_json(args.report, {
        "accuracy": acc,
        "mean_overlap": report.mean,
        "k": report.k,
        "mean_kl": kl,
        "n_samples": len(batch),
        "config_hash": meta.get("config_hash"),
    })
    print(f"accuracy {acc:.4f}  top-{report.k} overlap {report.mean:.4f}  mean KL {kl:.4f}")


def _combine(axes):
    out = []
    for combo in itertools.product(*axes):
        label = ";".join(v.label for v in combo)
        merged = {}
        for v in combo:
            merged.update({k: getattr(v, k) for k in ("lam", "mode", "points") if getattr(v, k) is not None})
        out.append(Variant(label, **merged))
    return out


def cmd_ablate(args):
    run = _run_config(args.data_spec)
    variants = _combine([parse_variants(v) for v in args.variants])
    model_cfg = replace(run.model, n_classes=run.scene.n_classes, patch_px=run.patch_px)
    for name in ("lam", "epochs", "lr"):
        if getattr(args, name) is not None:
            model_cfg = replace(model_cfg, **{name: getattr(args, name)})
    run = replace(run, model=model_cfg)
    results = run_ablation(run.scene, variants, range(args.seeds), model_cfg=model_cfg, prep_cfg=run.preprocess(),
                           n_train=args.n_train, n_test=args.n_test, k=args.topk, min_variants=1, min_seeds=1)
    write_ablation(results, args.out, extra={"config": run.to_json(), "config_hash": run.content_hash(),
                                             "summary": summarize(results)})
    for variant, (acc, ov, kl) in summarize(results).items():
        print(f"{variant:32s} accuracy {acc:.4f}  overlap {ov:.4f}  KL {kl:.4f}")


def cmd_render(args):
    if args.model:
        if not args.sample or args.index is None:
            raise CliError("--model needs --sample and --index")
        params, cfg, _ = _load_model(args.model)
        manifest_dir = os.path.dirname(os.path.normpath(args.sample))
        _, run = _load_dataset(manifest_dir)
        frames = _sample_frames(args.sample, run.scene.n_frames)
        if not 0 <= args.index < len(frames):
            raise CliError(f"frame index {args.index} out of range")
        attn, _ = predict(params, cfg, frames[None])
        frame, overlay = frames[args.index], attn[0, args.index]
    else:
        if not args.frame or not args.overlay:
            raise CliError("render needs --frame and --overlay, or --model with --sample and --index")
        frame = pgm.from_bytes(_read_bytes(args.frame))
        overlay = heatmap_from_bytes(_read_bytes(args.overlay))
    with open(args.out, "wb") as fh:
        fh.write(render_heatmap_pgm(frame, overlay))


# -- argument parsing ---------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="gazereg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="run config or scene spec JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="build per-frame gaze targets")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="run config JSON supplying defaults")
    s.add_argument("--sigma", type=float, default=20.0)
    s.add_argument("--window-ms", type=int, default=200)
    s.add_argument("--max-points", type=int, default=6)
    s.add_argument("--eps", type=float, default=20.0)
    s.add_argument("--eta", type=float, default=0.60)
    s.add_argument("--patch", type=int, default=8)
    s.add_argument("--mode", choices=("aggregated", "singular"), default="aggregated")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train the attention model")
    s.add_argument("--data", required=True)
    s.add_argument("--targets", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=100.0)
    s.add_argument("--epochs", type=int, default=60)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--batch", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a model against targets")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--targets", required=True)
    s.add_argument("--topk", type=int, default=10)
    s.add_argument("--report", required=True)
    s.add_argument("--oracle-attention", action="store_true", help="score the targets themselves as attention")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="sweep variants over several seeds")
    s.add_argument("--data-spec", help="run config or scene spec JSON")
    s.add_argument("--variants", action="append", required=True,
                   help="axis=v1,v2 with axis lambda, mode or points; repeat to cross axes")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--n-train", type=int, default=200)
    s.add_argument("--n-test", type=int, default=100)
    s.add_argument("--topk", type=int, default=10)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("render", help="blend a heatmap or attention map over a frame")
    s.add_argument("--frame", help="P5 frame")
    s.add_argument("--overlay", help="GZHM heatmap")
    s.add_argument("--model", help="checkpoint whose attention is drawn")
    s.add_argument("--sample", help="sample directory (with --model)")
    s.add_argument("--index", type=int, help="frame index (with --model)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"gazereg: {exc}", file=sys.stderr)
        return exc.code
    except (GazeRegError, ValueError, KeyError) as exc:
        print(f"gazereg: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"gazereg: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
