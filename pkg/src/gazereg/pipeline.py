"""Per-frame supervision targets for a clip, and dataset assembly."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ZeroMassError
from .flow import OcclusionConfig, occlusion_check
from .gaze import (
    AggregationConfig,
    AggregationEntry,
    PatchDistribution,
    PatchGrid,
    SmoothingConfig,
    aggregate_window,
    make_heatmap,
    make_singular,
    patchify,
    select_window,
)
from .model import Batch

log = logging.getLogger(__name__)

MODES = ("aggregated", "singular")


@dataclass(frozen=True)
class PreprocessConfig:
    smoothing: SmoothingConfig = SmoothingConfig()
    aggregation: AggregationConfig = AggregationConfig()
    occlusion: OcclusionConfig = OcclusionConfig()
    patch_px: int = 8
    mode: str = "aggregated"


@dataclass
class FrameTarget:
    frame: int
    t_ms: int
    heatmap: object  # Heatmap, or None when the uniform fallback was used
    dist: PatchDistribution
    checks: list = field(default_factory=list)  # (tau_ms, observed_ratio, verdict)
    fallback: bool = False


def frame_target(trace, t_ms, width, height, flow_lookup, cfg, frame=0):
    """Supervision for the frame at ``t_ms``.

    ``flow_lookup(a_ms, b_ms)`` returns the flow mapping time ``b_ms`` onto
    ``a_ms`` or ``None`` when it is unavailable; a missing flow marks that
    window member as occluded.
    """
    grid = PatchGrid.for_frame(width, height, cfg.patch_px)
    window = select_window(trace, t_ms, cfg.aggregation)
    checks = []
    try:
        if not window:
            raise ZeroMassError(f"no gaze in the window before {t_ms} ms")
        if cfg.mode == "singular":
            heat = make_singular(window[-1], width, height, cfg.smoothing)
        else:
            entries = []
            for g in window:
                m = make_heatmap(g, width, height, cfg.smoothing)
                if g.timestamp_ms == t_ms:
                    entries.append(AggregationEntry(m, is_current=True))
                    continue
                fwd = flow_lookup(t_ms, g.timestamp_ms)
                bwd = flow_lookup(g.timestamp_ms, t_ms)
                if fwd is None or bwd is None:
                    log.warning("frame %s: no flow for offset %s ms, treating it as occluded", frame, g.timestamp_ms)
                    checks.append((g.timestamp_ms, None, "missing"))
                    entries.append(AggregationEntry(m, fwd, occluded=True))
                    continue
                verdict = occlusion_check(fwd, bwd, cfg.occlusion)
                checks.append((g.timestamp_ms, verdict.observed_ratio, "occluded" if verdict.occluded else "valid"))
                entries.append(AggregationEntry(m, fwd, verdict))
            heat = aggregate_window(entries)
        return FrameTarget(frame, t_ms, heat, patchify(heat, grid), checks)
    except ZeroMassError as exc:
        log.info("frame %s: %s; substituting a uniform target", frame, exc)
        return FrameTarget(frame, t_ms, None, PatchDistribution.uniform(grid.n_patches), checks, fallback=True)


def sample_targets(sample, cfg):
    """Targets for every frame of an in-memory synthetic clip."""
    spec = sample.spec

    def lookup(a, b):
        return sample.flow(a, b) if (a, b) in sample.flows else None

    return [
        frame_target(sample.gaze, t, spec.width, spec.height, lookup, cfg, frame=i)
        for i, t in enumerate(sample.frame_times())
    ]


def build_batch(samples, targets, task="understand"):
    """Stack clips and their per-frame targets into one :class:`Batch`."""
    frames = np.stack([np.stack(s.frames) for s in samples])
    dists = np.stack([np.stack([ft.dist.probs for ft in per]) for per in targets])
    labels = np.array([s.task_label(task) for s in samples])
    return Batch(frames, dists, labels, task)


def reference_targets(samples, cfg):
    """Per-frame targets centred on the handled object's true position."""
    from .gaze import GazeSample

    out = []
    for s in samples:
        grid = PatchGrid.for_frame(s.spec.width, s.spec.height, cfg.patch_px)
        per = []
        for i, (x, y) in enumerate(s.target_track):
            heat = make_heatmap(GazeSample(0, x, y), s.spec.width, s.spec.height, cfg.smoothing)
            per.append(FrameTarget(i, s.spec.frame_time_ms(i), heat, patchify(heat, grid)))
        out.append(per)
    return out
