"""Dense float64 arithmetic, kernels and deterministic randomness.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape checks, stability tricks and error semantics the rest of
the package relies on.
"""

import hashlib
import math

import numpy as np

from .errors import DimensionError, DomainError, NumericError, ZeroMassError

DTYPE = np.float64


def as_tensor(x):
    return np.asarray(x, dtype=DTYPE)


def matmul(a, b):
    """Matrix product of ``a`` (m x k) and ``b`` (k x n).

    Each output entry is accumulated by the BLAS dot kernel over the inner
    index in ascending order; results are bit-identical across runs on the
    same machine and thread count.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax_rows(x):
    x = as_tensor(x)
    if x.ndim == 1:
        return softmax_rows(x[None, :])[0]
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gaussian_kernel_2d(sigma):
    """Normalized isotropic Gaussian truncated at radius ``ceil(3 sigma)``."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    r = int(math.ceil(3 * sigma))
    d = np.arange(-r, r + 1, dtype=DTYPE)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def normalize_nonneg(x):
    x = as_tensor(x)
    if np.any(x < 0):
        raise DomainError("normalize_nonneg needs nonnegative entries")
    total = x.sum()
    if not total > 0:
        raise ZeroMassError("cannot normalize a tensor with zero total mass")
    return x / total


def bilinear_sample_many(field, xs, ys):
    """Vectorized bilinear lookup of ``field`` at continuous points.

    ``field`` is ``h x w`` or ``h x w x c``. Points outside
    ``[0, w-1] x [0, h-1]`` read as zero.
    """
    field = as_tensor(field)
    xs = as_tensor(xs)
    ys = as_tensor(ys)
    h, w = field.shape[:2]
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.where(inside, xs, 0.0)
    yc = np.where(inside, ys, 0.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if field.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        mask = inside[..., None]
    else:
        mask = inside
    top = field[y0, x0] * (1 - fx) + field[y0, x1] * fx
    bottom = field[y1, x0] * (1 - fx) + field[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.where(mask, out, 0.0)


def bilinear_sample(field, x, y):
    """Sample ``field`` at the continuous coordinate ``(x, y)``."""
    out = bilinear_sample_many(field, np.array([x]), np.array([y]))[0]
    return float(out) if np.ndim(out) == 0 else out


def finite_diff_gradient(loss, params, h=1e-5):
    """Central-difference gradient of a scalar ``loss`` at ``params``."""
    if not h > 0:
        raise DomainError("finite-difference step must be positive")
    p = np.array(params, dtype=DTYPE).ravel()
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        up = loss(p.copy())
        p[i] = orig - h
        down = loss(p.copy())
        p[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss while probing coordinate {i}")
        grad[i] = (up - down) / (2 * h)
    return grad


class RngState:
    """Seeded source of independent, labelled random streams.

    Each stream is a Philox counter-based generator keyed by the seed and a
    SHA-256 digest of the label, so streams never share state and the same
    (seed, label, call sequence) always yields the same numbers.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._streams = {}

    def _key(self, label):
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return int.from_bytes(digest[:16], "little")

    def stream(self, label):
        if label not in self._streams:
            bitgen = np.random.Philox(key=self._key(label))
            self._streams[label] = np.random.Generator(bitgen)
        return self._streams[label]

    def child(self, label):
        """A fresh RngState whose seed is derived from this one and ``label``."""
        return RngState(self._key(f"child:{label}") & 0xFFFFFFFFFFFFFFFF)
