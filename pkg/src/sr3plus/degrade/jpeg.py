"""Baseline JPEG quantization round trip (no entropy coding).

Entropy coding is lossless, so skipping it leaves the decoded pixels the
same as a real baseline codec with these tables and this chroma layout.
"""

from __future__ import annotations

import numpy as np

from ..core import ImageTensor, InvalidArgument
from .resize import resize_array

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.full((8, 8), 99.0)
CHROMA_TABLE[:4, :4] = [
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
]


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


DCT8 = _dct_matrix()


def scaled_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling of a quantization table."""
    if not 1 <= quality <= 100:
        raise InvalidArgument(f"JPEG quality must be in [1, 100], got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def rgb_to_ycbcr(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _pad_to(plane, mult):
    h, w = plane.shape
    ph, pw = -h % mult, -w % mult
    return np.pad(plane, ((0, ph), (0, pw)), mode="edge")


def quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """DCT, quantize, dequantize and inverse-DCT one 0..255 plane."""
    h, w = plane.shape
    p = _pad_to(plane - 128.0, 8)
    H, W = p.shape
    blocks = p.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = DCT8 @ blocks @ DCT8.T
    coef = np.round(coef / table) * table
    out = DCT8.T @ coef @ DCT8
    out = out.transpose(0, 2, 1, 3).reshape(H, W) + 128.0
    return out[:h, :w]


def _subsample(plane):
    p = _pad_to(plane, 2)
    return p.reshape(p.shape[0] // 2, 2, p.shape[1] // 2, 2).mean(axis=(1, 3))


def jpeg_array(img: np.ndarray, quality: int, subsample_chroma: bool = True) -> np.ndarray:
    """Apply JPEG compression artifacts to an H x W x C array in [0, 1]."""
    q = int(quality)
    luma_q, chroma_q = scaled_table(LUMA_TABLE, q), scaled_table(CHROMA_TABLE, q)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise InvalidArgument(f"expected H x W x 1 or 3 image, got {img.shape}")
    px = np.clip(np.floor(img * 255.0 + 0.5), 0, 255)
    if img.shape[2] == 1:
        out = quantize_plane(px[:, :, 0], luma_q)[:, :, None]
    else:
        h, w = px.shape[:2]
        ycc = rgb_to_ycbcr(px)
        planes = [quantize_plane(ycc[:, :, 0], luma_q)]
        for ch in (1, 2):
            plane = ycc[:, :, ch]
            if subsample_chroma and h > 1 and w > 1:
                small = quantize_plane(_subsample(plane), chroma_q)
                up = resize_array(small[:, :, None], (small.shape[0] * 2, small.shape[1] * 2), "bilinear")
                planes.append(up[:h, :w, 0])
            else:
                planes.append(quantize_plane(plane, chroma_q))
        out = ycbcr_to_rgb(np.stack(planes, axis=-1))
    return np.clip(np.floor(out + 0.5), 0, 255) / 255.0


def jpeg_artifacts(img: ImageTensor, quality: int, subsample_chroma: bool = True) -> ImageTensor:
    return ImageTensor.unit(jpeg_array(img.data, quality, subsample_chroma))
