"""Binary 8-bit PGM (P5) encoding."""

import re

import numpy as np

from .errors import FormatError

_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def to_bytes(image):
    """Encode a ``[0, 1]`` float image (or uint8 array) as P5."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    return b"P5\n%d %d\n255\n" % (w, h) + image.tobytes()


def from_bytes(data, as_float=True):
    m = _HEADER.match(data)
    if not m:
        raise FormatError("not a binary PGM (P5) image")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM is supported, got maxval {maxval}")
    body = data[m.end() :]
    if len(body) != w * h:
        raise FormatError(f"PGM payload is {len(body)} bytes, expected {w * h}")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return img / 255.0 if as_float else img.copy()
