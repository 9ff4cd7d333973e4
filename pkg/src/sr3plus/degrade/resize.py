"""Separable image resampling: exact area averaging, bilinear, bicubic (Keys a=-0.5).

Interpolating modes use half-pixel centres, replicate borders and no
anti-aliasing prefilter.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from ..core import ImageTensor, InvalidArgument

MODES = ("area", "bilinear", "bicubic")
KEYS_A = -0.5


def keys_cubic(x, a: float = KEYS_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=256)
def resize_weights(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """Dense (n_out x n_in) matrix mapping one axis of the source to the output."""
    ratio = n_in / n_out
    i = np.arange(n_out, dtype=np.float64)[:, None]
    j = np.arange(n_in, dtype=np.float64)[None, :]
    if mode == "area":
        lo, hi = i * ratio, (i + 1) * ratio
        w = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    elif mode in ("bilinear", "bicubic"):
        src = (i[:, 0] + 0.5) * ratio - 0.5
        base = np.floor(src)
        frac = src - base
        if mode == "bilinear":
            offsets = np.array([0, 1])
            taps = np.stack([1.0 - frac, frac], axis=1)
        else:
            offsets = np.array([-1, 0, 1, 2])
            taps = keys_cubic(frac[:, None] - offsets[None, :])
        idx = np.clip(base[:, None].astype(int) + offsets[None, :], 0, n_in - 1)
        w = np.zeros((n_out, n_in))
        rows = np.repeat(np.arange(n_out), len(offsets))
        np.add.at(w, (rows, idx.ravel()), taps.ravel())
    else:
        raise InvalidArgument(f"unknown resize mode {mode!r}")
    w = w / w.sum(axis=1, keepdims=True)
    w.flags.writeable = False
    return w


def scaled_dims(height: int, width: int, scale: float) -> tuple[int, int]:
    if not scale > 0:
        raise InvalidArgument(f"scale must be positive, got {scale}")
    h, w = (int(math.floor(v * scale + 0.5)) for v in (height, width))
    if h < 1 or w < 1:
        raise InvalidArgument(f"scale {scale} maps {height}x{width} to an empty image")
    return h, w


def resize_array(img: np.ndarray, size: tuple[int, int], mode: str) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    oh, ow = size
    if oh < 1 or ow < 1:
        raise InvalidArgument(f"output size must be positive, got {size}")
    wh = resize_weights(img.shape[0], oh, mode)
    ww = resize_weights(img.shape[1], ow, mode)
    return np.einsum("oh,hwc,pw->opc", wh, img, ww, optimize=True)


def resize(img: ImageTensor, scale: float | None = None, size=None, mode: str = "bicubic") -> ImageTensor:
    """Resize by ``scale`` (dims rounded to nearest) or to an exact ``size``."""
    if (scale is None) == (size is None):
        raise InvalidArgument("give exactly one of scale or size")
    if size is None:
        size = scaled_dims(img.height, img.width, scale)
    return ImageTensor.unit(resize_array(img.data, tuple(size), mode))
