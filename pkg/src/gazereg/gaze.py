"""Gaze samples to per-frame supervision targets.

Pipeline per frame ``t``: each gaze sample in the window ``[t - window, t]``
becomes a Gaussian heatmap, earlier heatmaps are splatted forward along the
optical flow to frame ``t`` unless their frame failed the occlusion check,
the surviving maps are summed and normalized once, and the result is binned
into the patch grid of the vision model.
"""

import csv
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, DimensionError, DomainError, FormatError, GeometryError, LengthError, ZeroMassError
from .numerics import DTYPE, gaussian_kernel_2d, normalize_nonneg

HEATMAP_MAGIC = b"GZHM"
HEATMAP_VERSION = 1
GAZE_CSV_HEADER = ["timestamp_ms", "x", "y"]


@dataclass(frozen=True)
class GazeSample:
    timestamp_ms: int
    x: float
    y: float


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 20.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class AggregationConfig:
    window_ms: int = 200
    max_points: int = 6

    def __post_init__(self):
        if not self.window_ms > 0:
            raise DomainError("window_ms must be positive")
        if self.max_points < 1:
            raise DomainError("max_points must be at least 1")


@dataclass
class Heatmap:
    """Nonnegative attention mass over a ``height x width`` frame."""

    mass: np.ndarray
    normalized: bool = True

    @property
    def height(self):
        return self.mass.shape[0]

    @property
    def width(self):
        return self.mass.shape[1]

    def total(self):
        return float(self.mass.sum())


@dataclass(frozen=True)
class PatchGrid:
    n_h: int
    n_v: int
    patch_px: int

    @classmethod
    def for_frame(cls, width, height, patch_px):
        if patch_px < 1 or width % patch_px or height % patch_px:
            raise GeometryError(f"patch size {patch_px} does not tile a {width}x{height} frame")
        return cls(width // patch_px, height // patch_px, patch_px)

    @property
    def n_patches(self):
        return self.n_h * self.n_v

    @property
    def width(self):
        return self.n_h * self.patch_px

    @property
    def height(self):
        return self.n_v * self.patch_px

    def patch_of(self, x, y):
        """Row-major index of the patch containing pixel ``(x, y)``."""
        return int(y) // self.patch_px * self.n_h + int(x) // self.patch_px


@dataclass
class PatchDistribution:
    probs: np.ndarray

    @classmethod
    def uniform(cls, n_patches):
        return cls(np.full(n_patches, 1.0 / n_patches))


@dataclass
class AggregationEntry:
    """One window member: its heatmap, flow to the current frame and verdict.

    ``flow`` of ``None`` means identity. ``occluded`` accepts a bool or an
    object with an ``occluded`` attribute (an occlusion verdict). The
    current-frame entry always participates.
    """

    heatmap: Heatmap
    flow: object = None
    occluded: object = False
    is_current: bool = False

    def is_valid(self):
        if self.is_current:
            return True
        flag = getattr(self.occluded, "occluded", self.occluded)
        return not bool(flag)


def _check_inside(g, width, height):
    if not (0 <= g.x < width and 0 <= g.y < height):
        raise BoundsError(f"gaze ({g.x}, {g.y}) outside {width}x{height} frame")


def make_heatmap(g, width, height, cfg=SmoothingConfig()):
    """Gaussian-smoothed indicator at ``g``, cropped to the frame and renormalized."""
    _check_inside(g, width, height)
    kernel = gaussian_kernel_2d(cfg.sigma)
    r = kernel.shape[0] // 2
    gx = int(math.floor(g.x + 0.5))
    gy = int(math.floor(g.y + 0.5))
    gx, gy = min(gx, width - 1), min(gy, height - 1)
    mass = np.zeros((height, width), dtype=DTYPE)
    y0, y1 = max(gy - r, 0), min(gy + r + 1, height)
    x0, x1 = max(gx - r, 0), min(gx + r + 1, width)
    mass[y0:y1, x0:x1] = kernel[y0 - gy + r : y1 - gy + r, x0 - gx + r : x1 - gx + r]
    return Heatmap(normalize_nonneg(mass))


def make_singular(g, width, height, cfg=SmoothingConfig()):
    """Heatmap from the single gaze point at the frame time (no aggregation)."""
    return make_heatmap(g, width, height, cfg)


def select_window(trace, t_ms, cfg=AggregationConfig()):
    lo = t_ms - cfg.window_ms
    chosen = [g for g in trace if lo <= g.timestamp_ms <= t_ms]
    return chosen[-cfg.max_points :]


def warp_heatmap(m, flow):
    """Forward-splat each pixel's mass to ``p + flow(p)`` with bilinear weights.

    Mass landing outside the frame is dropped and the result is not
    renormalized.
    """
    h, w = m.mass.shape
    if (flow.height, flow.width) != (h, w):
        raise DimensionError(f"flow {flow.width}x{flow.height} does not match heatmap {w}x{h}")
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + flow.u
    ty = ys + flow.v
    src = m.mass
    keep = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1) & (src != 0)
    tx, ty, src = tx[keep], ty[keep], src[keep]
    x0 = np.floor(tx).astype(np.intp)
    y0 = np.floor(ty).astype(np.intp)
    fx = tx - x0
    fy = ty - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    idx = np.concatenate([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    wts = np.concatenate(
        [src * (1 - fx) * (1 - fy), src * fx * (1 - fy), src * (1 - fx) * fy, src * fx * fy]
    )
    out = np.bincount(idx, weights=wts, minlength=h * w).reshape(h, w)
    return Heatmap(out, normalized=False)


def aggregate_window(entries):
    """Sum the warped heatmaps of valid entries and normalize once."""
    if not entries:
        raise ZeroMassError("empty aggregation window")
    total = None
    for entry in entries:
        if not entry.is_valid():
            continue
        warped = entry.heatmap if entry.flow is None else warp_heatmap(entry.heatmap, entry.flow)
        total = warped.mass.copy() if total is None else total + warped.mass
    if total is None:
        raise ZeroMassError("every window entry is occluded and no current-frame map was given")
    return Heatmap(normalize_nonneg(total))


def patchify(h, grid):
    if (h.width, h.height) != (grid.width, grid.height):
        raise GeometryError(
            f"{grid.n_h}x{grid.n_v} grid of {grid.patch_px}px does not tile a {h.width}x{h.height} heatmap"
        )
    p = grid.patch_px
    sums = h.mass.reshape(grid.n_v, p, grid.n_h, p).sum(axis=(1, 3)).ravel()
    z = sums.sum()
    if not z > 0:
        raise ZeroMassError("heatmap has zero mass")
    return PatchDistribution(sums / z)


# -- persistence ---------------------------------------------------------


def parse_gaze_csv(text, width=None, height=None):
    """Parse a ``timestamp_ms,x,y`` trace; bounds are checked when dims are given."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty gaze file") from None
    if [c.strip() for c in header] != GAZE_CSV_HEADER:
        raise FormatError(f"bad gaze header {header!r}")
    trace = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise FormatError(f"line {lineno}: expected 3 fields, got {len(row)}")
        try:
            g = GazeSample(int(row[0]), float(row[1]), float(row[2]))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if trace and g.timestamp_ms <= trace[-1].timestamp_ms:
            raise FormatError(f"line {lineno}: timestamps must increase strictly")
        if width is not None and height is not None:
            _check_inside(g, width, height)
        trace.append(g)
    return trace


def format_gaze_csv(trace):
    lines = [",".join(GAZE_CSV_HEADER)]
    lines += [f"{g.timestamp_ms},{g.x!r},{g.y!r}" for g in trace]
    return "\n".join(lines) + "\n"


def heatmap_to_bytes(h):
    height, width = h.mass.shape
    head = HEATMAP_MAGIC + struct.pack("<III", HEATMAP_VERSION, width, height)
    return head + h.mass.astype("<f4").tobytes()


def heatmap_from_bytes(data):
    if len(data) < 16 or data[:4] != HEATMAP_MAGIC:
        raise FormatError("not a GZHM heatmap")
    version, width, height = struct.unpack("<III", data[4:16])
    if version != HEATMAP_VERSION:
        raise FormatError(f"unsupported heatmap version {version}")
    expected = 16 + 4 * width * height
    if len(data) != expected:
        raise LengthError(f"heatmap payload is {len(data)} bytes, expected {expected}")
    mass = np.frombuffer(data, dtype="<f4", offset=16).astype(DTYPE).reshape(height, width)
    return Heatmap(mass, normalized=False)


def format_patch_rows(rows):
    """CSV text for ``(frame_id, PatchDistribution)`` pairs."""
    rows = list(rows)
    n = len(rows[0][1].probs) if rows else 0
    out = [",".join(["frame_id"] + [f"p_{i}" for i in range(n)])]
    for frame_id, dist in rows:
        out.append(",".join([str(frame_id)] + [repr(float(p)) for p in dist.probs]))
    return "\n".join(out) + "\n"


def parse_patch_rows(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[0] != "frame_id":
        raise FormatError("patch distribution file lacks a frame_id header")
    rows = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"row for frame {row[0]} has {len(row) - 1} probabilities, expected {len(header) - 1}")
        rows.append((row[0], PatchDistribution(np.array([float(v) for v in row[1:]]))))
    return rows
