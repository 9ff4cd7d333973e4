"""Blur kernel families, their random parameters, and 2-D filtering."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, special

from ..core import ImageTensor, InvalidArgument, Prng

FAMILIES = ("gaussian", "generalized_gaussian", "plateau", "sinc")
FAMILY_PROBS = (0.63, 0.135, 0.135, 0.1)
RADII = (3, 5, 7, 9, 11)
GAUSSIAN_ISO_PROB = 9 / 14
PLATEAU_ISO_PROB = 0.8
SIGMA_RANGE = {1: (0.2, 3.0), 2: (0.2, 1.5)}
BETA_RANGE = {"generalized_gaussian": (0.5, 4.0), "plateau": (1.0, 2.0)}


def cutoff_range(radius: int) -> tuple[float, float]:
    return (math.pi / 3, math.pi) if radius < 6 else (math.pi / 5, math.pi)


@dataclass(frozen=True)
class BlurKernelSpec:
    family: str
    radius: int
    isotropic: bool = True
    sigma_x: float | None = None
    sigma_y: float | None = None
    rotation: float = 0.0
    beta: float | None = None
    cutoff: float | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def delta(cls):
        """A 3x3 kernel with all mass at the centre (identity filter)."""
        return cls("delta", 1)


def _uniform_half_open_pi(prng: Prng) -> float:
    # uniform on (-pi, pi]
    return math.pi - prng.uniform(0.0, 2.0 * math.pi)


def sample_blur_spec(prng: Prng, stage: int) -> BlurKernelSpec:
    """Draw one blur kernel specification for the given pipeline stage."""
    if stage not in SIGMA_RANGE:
        raise InvalidArgument(f"stage must be 1 or 2, got {stage}")
    family = FAMILIES[prng.choice(len(FAMILIES), p=FAMILY_PROBS)]
    radius = RADII[int(prng.integers(0, len(RADII)))]
    if family == "sinc":
        lo, hi = cutoff_range(radius)
        return BlurKernelSpec("sinc", radius, cutoff=float(prng.uniform(lo, hi)))

    iso_prob = PLATEAU_ISO_PROB if family == "plateau" else GAUSSIAN_ISO_PROB
    isotropic = bool(prng.uniform() < iso_prob)
    lo, hi = SIGMA_RANGE[stage]
    if isotropic:
        sx = sy = float(prng.uniform(lo, hi))
        rotation = 0.0
    else:
        sx, sy = (float(v) for v in prng.uniform(lo, hi, 2))
        rotation = _uniform_half_open_pi(prng)
    beta = None
    if family in BETA_RANGE:
        beta = float(prng.uniform(*BETA_RANGE[family]))
    return BlurKernelSpec(family, radius, isotropic, sx, sy, rotation, beta)


def sample_sinc_spec(prng: Prng) -> BlurKernelSpec:
    radius = RADII[int(prng.integers(0, len(RADII)))]
    lo, hi = cutoff_range(radius)
    return BlurKernelSpec("sinc", radius, cutoff=float(prng.uniform(lo, hi)))


def _mahalanobis_sq(spec: BlurKernelSpec, xx, yy):
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    # rotate into the kernel's principal frame
    u = c * xx + s * yy
    v = -s * xx + c * yy
    return (u / spec.sigma_x) ** 2 + (v / spec.sigma_y) ** 2


def circular_lowpass(cutoff: float, radius: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    rho = np.hypot(xx, yy)
    with np.errstate(invalid="ignore", divide="ignore"):
        k = cutoff * special.j1(cutoff * rho) / (2.0 * math.pi * rho)
    k[radius, radius] = cutoff**2 / (4.0 * math.pi)
    return k


def render_kernel(spec: BlurKernelSpec) -> np.ndarray:
    """Render a normalized (2r+1) x (2r+1) kernel."""
    r = spec.radius
    if spec.family == "delta":
        k = np.zeros((2 * r + 1, 2 * r + 1))
        k[r, r] = 1.0
        return k
    if spec.family == "sinc":
        k = circular_lowpass(spec.cutoff, r)
    else:
        ax = np.arange(-r, r + 1, dtype=np.float64)
        yy, xx = np.meshgrid(ax, ax, indexing="ij")
        d2 = _mahalanobis_sq(spec, xx, yy)
        if spec.family == "gaussian":
            k = np.exp(-0.5 * d2)
        elif spec.family == "generalized_gaussian":
            k = np.exp(-0.5 * d2 ** (0.5 * spec.beta))
        elif spec.family == "plateau":
            k = 1.0 / (1.0 + (0.5 * d2) ** spec.beta)
        else:
            raise InvalidArgument(f"unknown kernel family {spec.family!r}")
    return k / k.sum()


def fit_kernel(kernel: np.ndarray, height: int, width: int) -> np.ndarray:
    """Centre-crop a kernel so it is at most 2*min(H, W)+1 wide, renormalized."""
    limit = 2 * min(height, width) + 1
    n = kernel.shape[0]
    if n <= limit:
        return kernel
    cut = (n - limit) // 2
    k = kernel[cut : n - cut, cut : n - cut]
    return k / k.sum()


def convolve_array(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Filter an H x W x C array with mirror (reflect-101) borders, unclamped."""
    img = np.asarray(img, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise InvalidArgument(f"kernel must be square with odd size, got {kernel.shape}")
    if kernel.shape[0] > 2 * min(img.shape[:2]) + 1:
        raise InvalidArgument(
            f"kernel of size {kernel.shape[0]} too large for {img.shape[0]}x{img.shape[1]} image"
        )
    # the flip turns correlation into convolution
    return ndimage.correlate(img, kernel[::-1, ::-1, None], mode="mirror")


def convolve(img: ImageTensor, kernel) -> ImageTensor:
    return ImageTensor.unit(convolve_array(img.data, kernel))
