"""Synthetic egocentric clips with known gaze, flow and occlusion.

A clip is a pan over a static tabletop world: textured square objects sit on
a noisy background and the camera moves in whole-cell jumps, so every flow
field is an exact integer translation. One object is the one the wearer
handles; it carries a faint grip motif and the gaze trace keeps returning to
it. Occlusions are large sprites that cross the view at a window offset and
move quickly, making forward and backward flow disagree over the area they
cover.

Flows are kept as small scripts (a base translation plus an optional
rectangle with its own motion) and turned into :class:`FlowField` on demand.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import pgm
from .errors import DomainError, PlacementError
from .flow import FlowField, write_flo
from .gaze import GazeSample, format_gaze_csv
from .numerics import RngState

CLASS_NAMES = ("cup", "knife", "bowl", "phone", "book", "apple", "spoon", "bottle", "plate", "towel", "jar", "box")
CATALOGUE_SEED = 20240501
OCCLUDER_SPEED = (40, 24)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    n_objects: int = 3
    n_classes: int = 6
    duration_s: int = 3
    frame_hz: int = 1
    gaze_hz: int = 30
    motion_px_per_frame: int = 8
    occlusion_rate: float = 0.0
    noise_sigma: float = 0.15
    seed: int = 0
    cell_px: int = 8
    object_px: int = 16
    hand_px: int = 8
    fixation_ms: int = 200
    glance_ms: int = 100
    glance_rate: float = 0.25
    motif_contrast: float = 0.15
    flow_window_ms: int = 400
    task: str = "understand"

    def __post_init__(self):
        if self.n_classes > len(CLASS_NAMES) or self.n_classes < 2:
            raise DomainError(f"n_classes must be in [2, {len(CLASS_NAMES)}]")
        if self.n_objects < 1 or self.n_objects > self.n_classes:
            raise DomainError("n_objects must be between 1 and n_classes")
        if self.fixation_ms <= 0 or self.glance_ms <= 0:
            raise DomainError("fixation and glance durations must be positive")
        for name in ("occlusion_rate", "glance_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise DomainError(f"{name} must lie in [0, 1]")
        if self.width % self.cell_px or self.height % self.cell_px:
            raise DomainError("cell size must tile the frame")
        if self.object_px % self.cell_px:
            raise DomainError("object size must be a multiple of the cell size")
        if self.motion_px_per_frame % self.cell_px:
            raise DomainError("camera motion must be a multiple of the cell size")
        if self.task not in ("understand", "predict"):
            raise DomainError(f"unknown task {self.task!r}")

    @property
    def n_frames(self):
        return self.duration_s * self.frame_hz

    def frame_time_ms(self, i):
        """Frames sit half a period into each sampling interval."""
        period = 1000 // self.frame_hz
        return period // 2 + i * period

    def gaze_times(self):
        end = self.duration_s * 1000
        n = end * self.gaze_hz // 1000
        return [k * 1000 // self.gaze_hz for k in range(n + 1)]

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise DomainError(f"unknown scene spec keys {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class FlowScript:
    """Uniform translation with an optional rectangle moving differently."""

    du: int
    dv: int
    rect: tuple = None  # (x0, y0, x1, y1) half-open, view coordinates
    rect_du: int = 0
    rect_dv: int = 0

    def field(self, width, height):
        f = FlowField.uniform(width, height, self.du, self.dv)
        if self.rect is not None:
            x0, y0, x1, y1 = self.rect
            f.u[y0:y1, x0:x1] = self.rect_du
            f.v[y0:y1, x0:x1] = self.rect_dv
        return f

    def covered_fraction(self, width, height):
        if self.rect is None:
            return 0.0
        x0, y0, x1, y1 = self.rect
        return (x1 - x0) * (y1 - y0) / (width * height)


@dataclass
class SyntheticSample:
    spec: SceneSpec
    frames: list
    gaze: list
    flows: dict  # (a_ms, b_ms) -> FlowScript for the flow from b to a
    occluded: dict  # (frame index, tau_ms) -> bool
    label: int
    future_label: int
    label_text: str
    camera: list  # per gaze tick (time_ms, cx, cy)
    objects: list  # dicts with cell position, class, role
    target_track: list  # per frame (x, y) centroid of the target in view

    def flow(self, a_ms, b_ms):
        """Ground-truth flow field mapping time ``b_ms`` onto time ``a_ms``."""
        return self.flows[(a_ms, b_ms)].field(self.spec.width, self.spec.height)

    def frame_times(self):
        return [self.spec.frame_time_ms(i) for i in range(len(self.frames))]

    def task_label(self, task):
        return self.future_label if task == "predict" else self.label


def class_templates(n_classes, cell):
    """Fixed appearance catalogue, independent of the scene seed."""
    gen = RngState(CATALOGUE_SEED).stream(f"templates:{cell}")
    base = gen.uniform(0.15, 0.95, size=(len(CLASS_NAMES), cell, cell))
    return base[:n_classes]


def grip_motif(size):
    """Brightening applied to the handled object, which is lit and near the camera."""
    return np.ones((size, size))


def hand_sprite(width, height):
    """Striped hand drawn just below the handled object."""
    rows = np.where(np.arange(height) % 2 == 0, 0.82, 0.62)
    return np.repeat(rows[:, None], width, axis=1)


def _camera_path(spec, gen):
    """Integer camera offsets per gaze tick.

    At most one jump happens between consecutive frames and the offset never
    leaves ``[-step, step]`` on either axis.
    """
    times = spec.gaze_times()
    step = spec.motion_px_per_frame
    cx = cy = 0
    jumps = {}
    for i in range(1, spec.n_frames):
        lo, hi = spec.frame_time_ms(i - 1), spec.frame_time_ms(i)
        if step == 0:
            continue
        ticks = [t for t in times if lo < t <= hi]
        nx, ny = (int(d) * step for d in gen.integers(-1, 2, size=2))
        if (nx, ny) != (cx, cy):
            jumps[ticks[int(gen.integers(len(ticks)))]] = (nx, ny)
            cx, cy = nx, ny
    path = []
    cx = cy = 0
    for t in times:
        if t in jumps:
            cx, cy = jumps[t]
        path.append((t, cx, cy))
    return path


def _place_objects(spec, gen, path):
    """Cell-aligned, non-overlapping object corners visible in every frame."""
    cell, size = spec.cell_px, spec.object_px
    xs = [c[1] for c in path]
    ys = [c[2] for c in path]
    # each object keeps a free band below it where a hand can appear
    lo_x, hi_x = max(xs), min(xs) + spec.width - size
    lo_y, hi_y = max(ys), min(ys) + spec.height - size - spec.hand_px
    cells = [(x, y) for y in range(lo_y, hi_y + 1, cell) for x in range(lo_x, hi_x + 1, cell)]
    if len(cells) < spec.n_objects:
        raise PlacementError("not enough visible cells for the requested objects")
    def apart(a, b):
        return abs(a[0] - b[0]) >= size or abs(a[1] - b[1]) >= size + spec.hand_px

    for _ in range(200):
        chosen = []
        for i in gen.permutation(len(cells)):
            if all(apart(cells[i], c) for c in chosen):
                chosen.append(cells[i])
                if len(chosen) == spec.n_objects:
                    return chosen
    raise PlacementError("could not place objects without overlap after 200 tries")


def _render(spec, world_bg, objects, templates, motif, cam, gen, handled):
    cell = spec.object_px
    _, cx, cy = cam
    m = world_bg.shape[0] // 2 - spec.height // 2
    view = world_bg[m + cy : m + cy + spec.height, m + cx : m + cx + spec.width].copy()
    for k, obj in enumerate(objects):
        x, y = obj["x"] - cx, obj["y"] - cy
        patch = templates[obj["cls"]].copy()
        if k == handled:
            patch = patch + spec.motif_contrast * motif
        patch = patch + gen.normal(0, spec.noise_sigma, size=patch.shape)
        view[y : y + cell, x : x + cell] = patch
        if k == handled and spec.hand_px:
            hand = hand_sprite(cell, spec.hand_px) + gen.normal(0, spec.noise_sigma, size=(spec.hand_px, cell))
            view[y + cell : y + cell + spec.hand_px, x : x + cell] = hand
    return np.clip(np.rint(view * 255), 0, 255) / 255.0


def generate_gaze_trace(spec, objects, path, handled_by_time, gen, jitter_px=2.0, saccades=True):
    """Fixations on the handled object, fleeting glances at distractors, and saccades between.

    ``handled_by_time(t)`` returns the index of the object being handled at
    time ``t``. A fixation lasts ``fixation_ms`` (a glance ``glance_ms``) and
    its samples jitter up to ``jitter_px`` around the object centre; saccades
    take one or two samples on the straight line to the next fixation point.
    """
    times = [c[0] for c in path]
    cams = {c[0]: (c[1], c[2]) for c in path}
    fix_len = max(1, round(spec.fixation_ms * spec.gaze_hz / 1000))
    glance_len = max(1, round(spec.glance_ms * spec.gaze_hz / 1000))
    half = (spec.object_px - 1) / 2
    trace = []
    k = 0
    prev = None  # world coordinates of the last sample

    def emit(wx, wy):
        cx, cy = cams[times[k]]
        trace.append(_clamped(spec, times[k], wx - cx, wy - cy))
        return (trace[-1].x + cx, trace[-1].y + cy)

    while k < len(times):
        main = handled_by_time(times[k])
        obj, n_fix = main, fix_len
        if len(objects) > 1 and gen.random() < spec.glance_rate:
            others = [i for i in range(len(objects)) if i != main]
            obj, n_fix = others[int(gen.integers(len(others)))], glance_len
        anchor = (objects[obj]["x"] + half, objects[obj]["y"] + half)
        if saccades and prev is not None:
            n_sac = int(gen.integers(1, 3))
            for j in range(n_sac):
                if k >= len(times):
                    break
                a = (j + 1) / (n_sac + 1)
                emit(prev[0] + a * (anchor[0] - prev[0]), prev[1] + a * (anchor[1] - prev[1]))
                k += 1
        for _ in range(n_fix):
            if k >= len(times):
                break
            jx, jy = gen.uniform(-jitter_px, jitter_px, size=2) if jitter_px else (0.0, 0.0)
            prev = emit(anchor[0] + jx, anchor[1] + jy)
            k += 1
    return trace


def _clamped(spec, t, x, y):
    x = min(max(x, 0.0), spec.width - 1.0)
    y = min(max(y, 0.0), spec.height - 1.0)
    return GazeSample(int(t), float(x), float(y))


def _window_ticks(spec, t_ms):
    return [t for t in spec.gaze_times() if t_ms - spec.flow_window_ms <= t < t_ms]


def _occluder_rect(spec, gen, target_xy):
    """A sprite covering 70-90 percent of the view, always over the target."""
    W, H = spec.width, spec.height
    frac = gen.uniform(0.7, 0.9)
    rw = int(gen.integers(int(math.ceil(frac * W)), W + 1))
    rh = int(min(H, math.ceil(frac * W * H / rw)))
    tx, ty = target_xy
    x0 = int(gen.integers(max(0, int(tx) + 1 - rw + 1), min(int(tx), W - rw) + 1)) if rw < W else 0
    y0 = int(gen.integers(max(0, int(ty) + 1 - rh + 1), min(int(ty), H - rh) + 1)) if rh < H else 0
    return (x0, y0, x0 + rw, y0 + rh)


def generate_scene(spec, rng=None):
    """Render one clip; deterministic in ``(spec, spec.seed)`` or the given rng."""
    rng = rng or RngState(spec.seed)
    gen = rng.stream("scene")
    path = _camera_path(spec, gen)
    cells = _place_objects(spec, gen, path)
    target_cls = int(gen.integers(spec.n_classes))
    others = [c for c in range(spec.n_classes) if c != target_cls]
    dist_cls = list(gen.permutation(others)[: spec.n_objects - 1])
    objects = [{"x": x, "y": y, "cls": int(c), "role": "distractor"} for (x, y), c in zip(cells, [target_cls] + dist_cls)]
    objects[0]["role"] = "target"
    future = 0
    if spec.task == "predict" and len(objects) > 1:
        future = 1 + int(gen.integers(len(objects) - 1))
        objects[future]["role"] = "next"
    last_frame_start = spec.frame_time_ms(spec.n_frames - 1) - spec.flow_window_ms

    def handled(t):
        return future if spec.task == "predict" and t > last_frame_start else 0

    margin = max(abs(c) for p in path for c in p[1:]) + spec.width
    world = 0.5 + rng.stream("background").normal(0, spec.noise_sigma, size=(2 * margin, 2 * margin))
    world += 0.1 * np.sin(np.arange(2 * margin) / 5.0)[None, :]
    templates = class_templates(spec.n_classes, spec.object_px)
    motif = grip_motif(spec.object_px)
    cams = {p[0]: p for p in path}
    frames, track = [], []
    tex = rng.stream("texture")
    half = (spec.object_px - 1) / 2
    for i in range(spec.n_frames):
        t = spec.frame_time_ms(i)
        cam = cams[t]
        h = handled(t)
        frames.append(_render(spec, world, objects, templates, motif, cam, tex, h))
        track.append((objects[h]["x"] - cam[1] + half, objects[h]["y"] - cam[2] + half))
    gaze = generate_gaze_trace(spec, objects, path, handled, rng.stream("gaze"))

    flows, occluded = {}, {}
    for i in range(spec.n_frames):
        t = spec.frame_time_ms(i)
        _, ctx, cty = cams[t]
        if i + 1 < spec.n_frames:
            t2 = spec.frame_time_ms(i + 1)
            _, c2x, c2y = cams[t2]
            flows[(t2, t)] = FlowScript(ctx - c2x, cty - c2y)
            flows[(t, t2)] = FlowScript(c2x - ctx, c2y - cty)
        for tau in _window_ticks(spec, t):
            _, ccx, ccy = cams[tau]
            flows[(t, tau)] = FlowScript(ccx - ctx, ccy - cty)
            flows[(tau, t)] = FlowScript(ctx - ccx, cty - ccy)
            occluded[(i, tau)] = False
    sample = SyntheticSample(
        spec=spec,
        frames=frames,
        gaze=gaze,
        flows=flows,
        occluded=occluded,
        label=target_cls,
        future_label=objects[future]["cls"],
        label_text=f"picking up the {CLASS_NAMES[target_cls]}",
        camera=[list(p) for p in path],
        objects=objects,
        target_track=track,
    )
    occ_gen = rng.stream("occlusion")
    chosen = [key for key in sorted(occluded) if occ_gen.random() < spec.occlusion_rate]
    return inject_occlusion(sample, chosen, occ_gen)


def inject_occlusion(sample, which, gen=None):
    """Occlude the given ``(frame index, tau_ms)`` window members.

    A fast sprite covers the handled object at time ``tau``; inside it the
    forward flow follows the sprite while the backward flow still follows the
    scene, so the pair is inconsistent exactly over the covered area.
    """
    if not which:
        return sample
    gen = gen or RngState(sample.spec.seed).stream("occlusion")
    spec = sample.spec
    flows = dict(sample.flows)
    occluded = dict(sample.occluded)
    cams = {c[0]: c for c in sample.camera}
    half = (spec.object_px - 1) / 2
    for i, tau in which:
        t = spec.frame_time_ms(i)
        base = flows[(t, tau)]
        _, cx, cy = cams[tau]
        target = sample.objects[0] if spec.task != "predict" else sample.objects[_handled_index(sample, tau)]
        rect = _occluder_rect(spec, gen, (target["x"] - cx + half, target["y"] - cy + half))
        flows[(t, tau)] = replace(base, rect=rect, rect_du=OCCLUDER_SPEED[0], rect_dv=OCCLUDER_SPEED[1])
        occluded[(i, tau)] = True
    return replace(sample, flows=flows, occluded=occluded)


def _handled_index(sample, t):
    spec = sample.spec
    start = spec.frame_time_ms(spec.n_frames - 1) - spec.flow_window_ms
    for k, obj in enumerate(sample.objects):
        if obj["role"] == "next" and t > start:
            return k
    return 0


# -- on-disk layout -------------------------------------------------------


def truth_record(sample):
    return {
        "label": sample.label,
        "future_label": sample.future_label,
        "label_text": sample.label_text,
        "frame_times_ms": sample.frame_times(),
        "occluded": [
            {"frame": i, "tau_ms": tau, "occluded": flag} for (i, tau), flag in sorted(sample.occluded.items())
        ],
        "target_track": [list(map(float, p)) for p in sample.target_track],
        "objects": sample.objects,
        "camera": sample.camera,
        "spec": sample.spec.to_json(),
    }


def save_sample(sample, directory):
    os.makedirs(os.path.join(directory, "frames"), exist_ok=True)
    os.makedirs(os.path.join(directory, "flow"), exist_ok=True)
    for i, frame in enumerate(sample.frames):
        with open(os.path.join(directory, "frames", f"{i}.pgm"), "wb") as fh:
            fh.write(pgm.to_bytes(frame))
    with open(os.path.join(directory, "gaze.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_gaze_csv(sample.gaze))
    for (a, b) in sorted(sample.flows):
        with open(os.path.join(directory, "flow", f"{a}_{b}.flo"), "wb") as fh:
            fh.write(write_flo(sample.flow(a, b)))
    with open(os.path.join(directory, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth_record(sample), fh, indent=1, sort_keys=True)
        fh.write("\n")


def generate_suite(spec, count, seed):
    """``count`` clips whose per-clip seeds derive from ``seed``."""
    root = RngState(seed)
    return [generate_scene(replace(spec, seed=root.child(f"sample:{k}").seed)) for k in range(count)]
