"""Optical flow fields: Middlebury I/O, block matching and occlusion checks."""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, FormatError, LengthError
from .numerics import DTYPE, as_tensor, bilinear_sample_many

FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"


@dataclass
class FlowField:
    """Per-pixel displacement ``(u, v)`` in pixels, both ``height x width``."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = as_tensor(self.u)
        self.v = as_tensor(self.v)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise DimensionError(f"u {self.u.shape} and v {self.v.shape} must be equal 2-D shapes")

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def width(self):
        return self.u.shape[1]

    @classmethod
    def zeros(cls, width, height):
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def uniform(cls, width, height, du, dv):
        return cls(np.full((height, width), float(du)), np.full((height, width), float(dv)))

    def stacked(self):
        return np.stack([self.u, self.v], axis=-1)


@dataclass(frozen=True)
class OcclusionConfig:
    eps: float = 20.0
    eta: float = 0.60

    def __post_init__(self):
        if not self.eps > 0:
            raise DomainError("eps must be positive")
        if not 0 < self.eta <= 1:
            raise DomainError("eta must lie in (0, 1]")


@dataclass
class OcclusionVerdict:
    occluded: bool
    observed_ratio: float
    discrepancy: np.ndarray


def write_flo(flow):
    head = FLO_TAG + struct.pack("<ii", flow.width, flow.height)
    payload = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    return head + payload.tobytes()


def read_flo(data):
    if len(data) < 12:
        raise LengthError(f".flo header needs 12 bytes, got {len(data)}")
    (magic,) = struct.unpack("<f", data[:4])
    if magic != FLO_MAGIC:
        raise FormatError("bad .flo magic; expected PIEH")
    width, height = struct.unpack("<ii", data[4:12])
    if width < 0 or height < 0:
        raise FormatError(f"negative .flo dimensions {width}x{height}")
    expected = 12 + 8 * width * height
    if len(data) != expected:
        raise LengthError(f".flo payload is {len(data)} bytes, expected {expected}")
    uv = np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width, 2).astype(DTYPE)
    return FlowField(uv[..., 0].copy(), uv[..., 1].copy())


def _displacement_order(radius):
    cands = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # stable sort keeps row-major scan order among equal magnitudes
    return sorted(cands, key=lambda d: d[0] * d[0] + d[1] * d[1])


def estimate_flow_blockmatch(a, b, block, radius):
    """Exhaustive SAD block matching from frame ``a`` to frame ``b``.

    Candidate blocks must lie fully inside ``b``. Ties go to the smallest
    displacement magnitude, then to the earliest displacement in row-major
    scan order. The winning block displacement is broadcast to its pixels.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"frames {a.shape} and {b.shape} must be equal 2-D shapes")
    if radius < 1:
        raise DomainError("search radius must be at least 1")
    h, w = a.shape
    if block < 1 or h % block or w % block:
        raise DimensionError(f"block {block} does not divide {w}x{h}")
    nbv, nbh = h // block, w // block
    by = np.arange(nbv)[:, None] * block
    bx = np.arange(nbh)[None, :] * block
    best = np.full((nbv, nbh), np.inf)
    best_u = np.zeros((nbv, nbh))
    best_v = np.zeros((nbv, nbh))
    padded = np.pad(b, radius, mode="constant")
    for dx, dy in _displacement_order(radius):
        shifted = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
        sad = np.abs(a - shifted).reshape(nbv, block, nbh, block).sum(axis=(1, 3))
        valid = (by + dy >= 0) & (by + dy + block <= h) & (bx + dx >= 0) & (bx + dx + block <= w)
        better = valid & (sad < best)
        best = np.where(better, sad, best)
        best_u = np.where(better, dx, best_u)
        best_v = np.where(better, dy, best_v)
    u = np.repeat(np.repeat(best_u, block, axis=0), block, axis=1)
    v = np.repeat(np.repeat(best_v, block, axis=0), block, axis=1)
    return FlowField(u, v)


def occlusion_check(fwd, bwd, cfg=OcclusionConfig()):
    """Forward-backward consistency test between frames ``tau`` and ``t``.

    ``fwd`` maps ``tau -> t`` and ``bwd`` maps ``t -> tau``. Each pixel lands
    at ``p + fwd(p)``; the backward flow is sampled there bilinearly (zero
    outside the frame) and the discrepancy is the Euclidean norm of the
    round trip. The frame is occluded when the share of pixels whose
    discrepancy exceeds ``eps`` is greater than ``eta``.
    """
    if (fwd.height, fwd.width) != (bwd.height, bwd.width):
        raise DimensionError("forward and backward flows differ in size")
    h, w = fwd.u.shape
    ys, xs = np.mgrid[0:h, 0:w]
    back = bilinear_sample_many(bwd.stacked(), xs + fwd.u, ys + fwd.v)
    delta = np.hypot(fwd.u + back[..., 0], fwd.v + back[..., 1])
    ratio = np.count_nonzero(delta > cfg.eps) / (h * w)
    return OcclusionVerdict(bool(ratio > cfg.eta), float(ratio), delta)
