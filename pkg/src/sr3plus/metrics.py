"""PSNR, SSIM and a Fréchet feature distance for evaluating super-resolution."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core import ImageTensor, InvalidArgument, Prng
from .degrade.resize import resize_array
from .diffusion import DiffusionStepPlan, NoiseSchedule, ancestral_sample, noise_augment

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, ImageTensor) else x, dtype=np.float64)


def _pair(a, b):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"image dims differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img, w):
    r = len(w) // 2
    out = ndimage.correlate1d(img, w, axis=0, mode="constant")
    out = ndimage.correlate1d(out, w, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SSIM at every valid window position of two single-channel images."""
    w = gaussian_window_1d()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a**2
    sbb = _filter_valid(b * b, w) - mu_b**2
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise InvalidArgument(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}px SSIM window")
    return float(np.mean([ssim_map(a[:, :, k], b[:, :, k]).mean() for k in range(a.shape[2])]))


@dataclass(frozen=True)
class FeatureExtractor:
    """Frozen random conv net standing in for Inception features."""

    kind: str = "fixed_random_conv"
    seed: int = 0
    feature_dim: int = 64
    image_channels: int = 3
    widths: tuple = (16, 32)

    def __post_init__(self):
        if self.kind != "fixed_random_conv":
            raise InvalidArgument(f"unsupported feature extractor {self.kind!r}")

    def weights(self):
        prng = Prng(self.seed).split("features")
        chans = [self.image_channels, *self.widths, self.feature_dim]
        out = []
        for i in range(3):
            shape = (chans[i + 1], chans[i], 3, 3)
            w = prng.split(i).normal(shape) * np.sqrt(2.0 / (chans[i] * 9))
            out.append(torch.from_numpy(w))
        return out


def extract_features(images, ex: FeatureExtractor, batch_size: int = 256) -> np.ndarray:
    """Map N x H x W x C images to an N x feature_dim matrix."""
    imgs = np.stack([_arr(x) for x in images]) if isinstance(images, (list, tuple)) else _arr(images)
    if imgs.ndim != 4:
        raise InvalidArgument(f"expected N x H x W x C images, got {imgs.shape}")
    weights = ex.weights()
    feats = []
    with torch.no_grad():
        for i in range(0, len(imgs), batch_size):
            x = torch.from_numpy(np.moveaxis(imgs[i : i + batch_size], -1, 1) - 0.5)
            for k, w in enumerate(weights):
                x = F.conv2d(x, w, stride=2, padding=1)
                x = F.relu(x) if k < 2 else x.abs()
            feats.append(x.mean(dim=(2, 3)).numpy())
    return np.concatenate(feats) if feats else np.zeros((0, ex.feature_dim))


def feature_stats(features: np.ndarray):
    f = np.asarray(features, dtype=np.float64)
    return f.mean(axis=0), np.cov(f, rowvar=False)


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    d = mu1.shape[0]
    if mu2.shape != (d,) or cov1.shape != (d, d) or cov2.shape != (d, d):
        raise InvalidArgument("means and covariances must share one dimension")
    cov1 = 0.5 * (cov1 + cov1.T)
    cov2 = 0.5 * (cov2 + cov2.T)
    s1 = _psd_sqrt(cov1)
    inner = s1 @ cov2 @ s1
    eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = mu1 - mu2
    return max(0.0, float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt))


@dataclass
class MetricsReport:
    psnr_mean: float
    ssim_mean: float
    frechet: float
    n_pairs: int
    t_eval: float
    config_hash: str | None = None

    def __post_init__(self):
        if self.n_pairs <= 0:
            raise InvalidArgument("a report needs at least one pair")

    def to_dict(self):
        return asdict(self)


def upsample(lr: np.ndarray, magnification: int = 4) -> np.ndarray:
    """Bicubic-upsample an N x h x w x C batch by the magnification factor."""
    h, w = lr.shape[1:3]
    return np.stack([resize_array(x, (h * magnification, w * magnification), "bicubic")
                     for x in lr])


def evaluate(model, eval_set, t_eval: float, sched: NoiseSchedule, plan: DiffusionStepPlan,
             ex: FeatureExtractor, prng: Prng, magnification: int = 4,
             return_samples: bool = False):
    """Super-resolve every pair in ``eval_set`` and score against the HR crops.

    ``model`` is a denoiser ``(z_t, t, c_tau, tau) -> eps_hat`` over the whole
    batch.  Returns a MetricsReport (and the samples when asked).
    """
    if len(eval_set) == 0:
        raise InvalidArgument("empty eval set")
    lr = np.stack([_arr(p.lr) for p in eval_set])
    hr = np.stack([_arr(p.hr) for p in eval_set])
    cond = upsample(lr, magnification)
    c_tau, _ = noise_augment(cond, t_eval, prng.split("nca"), sched)
    out = ancestral_sample(model, c_tau, t_eval, plan, prng.split("sample"), sched)
    out = out.astype(np.float32).astype(np.float64)
    p = [psnr(o, h) for o, h in zip(out, hr)]
    s = [ssim(o, h) for o, h in zip(out, hr)]
    fd = frechet_distance(*feature_stats(extract_features(out, ex)),
                          *feature_stats(extract_features(hr, ex)))
    report = MetricsReport(float(np.mean(p)), float(np.mean(s)), fd, len(eval_set), float(t_eval))
    return (report, out) if return_samples else report
