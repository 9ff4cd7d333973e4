"""Continuous-time Gaussian diffusion with a cosine log-SNR schedule.

Array arguments may be numpy arrays, ImageTensors or torch tensors; the
schedule coefficients are computed in float64 numpy and cast to match.
Batched calls put the batch on axis 0 and pass ``t`` (or ``tau``) as a
length-N vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .core import LATENT, UNIT, ImageTensor, InvalidArgument, Prng


class SingularScheduleError(ArithmeticError):
    pass


class SamplingDiverged(ArithmeticError):
    def __init__(self, step: int, t: float, items=()):
        where = f", batch items {list(items)}" if len(items) else ""
        super().__init__(f"denoiser produced non-finite output at step {step} (t={t:.6f}){where}")
        self.step = step
        self.t = t
        self.items = list(items)


class TrainingDiverged(ArithmeticError):
    def __init__(self, step, detail=""):
        super().__init__(f"non-finite loss at step {step}{': ' + detail if detail else ''}")
        self.step = step
        self.detail = detail


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "cosine_logsnr"
    logsnr_min: float = -20.0
    logsnr_max: float = 20.0

    def __post_init__(self):
        if self.kind != "cosine_logsnr":
            raise InvalidArgument(f"unsupported schedule kind {self.kind!r}")
        if not self.logsnr_min < self.logsnr_max:
            raise InvalidArgument("logsnr clamp must satisfy min < max")

    def logsnr(self, t):
        t = _check_t(t)
        with np.errstate(divide="ignore"):
            lam = -2.0 * np.log(np.tan(0.5 * np.pi * t))
        return np.clip(lam, self.logsnr_min, self.logsnr_max)

    def alpha(self, t):
        return expit(self.logsnr(t))

    def to_dict(self):
        return {"kind": self.kind, "clamp": [self.logsnr_min, self.logsnr_max]}

    @classmethod
    def from_dict(cls, d):
        lo, hi = d.get("clamp", (-20.0, 20.0))
        return cls(d.get("kind", "cosine_logsnr"), float(lo), float(hi))


@dataclass(frozen=True)
class NcaConfig:
    tau_max: float = 0.5
    t_eval: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.t_eval <= self.tau_max <= 1.0:
            raise InvalidArgument(f"need 0 <= t_eval <= tau_max <= 1, got {self}")


@dataclass(frozen=True)
class DiffusionStepPlan:
    num_steps: int = 256

    def __post_init__(self):
        if self.num_steps < 1:
            raise InvalidArgument("num_steps must be >= 1")

    @property
    def timesteps(self) -> np.ndarray:
        T = self.num_steps
        return np.arange(T, -1, -1, dtype=np.float64) / T


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise InvalidArgument(f"t must lie in [0, 1], got {t}")
    return t


def schedule_coeffs(sched: NoiseSchedule, t):
    """Return ``(sqrt(alpha_t), sqrt(1 - alpha_t))``."""
    lam = sched.logsnr(t)
    return np.sqrt(expit(lam)), np.sqrt(expit(-lam))


def _raw(x):
    return x.data if isinstance(x, ImageTensor) else x


def _like(coef, ref):
    """Cast a float64 coefficient to ``ref``'s array type, broadcasting a
    per-item vector over the trailing axes."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 1 and np.ndim(ref) > 1:
        coef = coef.reshape((-1,) + (1,) * (np.ndim(ref) - 1))
    if hasattr(ref, "detach"):
        import torch

        return torch.as_tensor(coef, dtype=ref.dtype, device=ref.device)
    return coef.astype(np.asarray(ref).dtype) if np.asarray(ref).dtype == np.float32 else coef


def _wrap(result, template, domain=LATENT):
    if isinstance(template, ImageTensor):
        return ImageTensor(np.asarray(result, dtype=np.float32), domain)
    return result


def forward_sample(x, t, eps, sched: NoiseSchedule):
    """z_t = sqrt(alpha_t) x + sqrt(1 - alpha_t) eps."""
    xr, er = _raw(x), _raw(eps)
    if tuple(np.shape(xr)) != tuple(np.shape(er)):
        raise InvalidArgument(f"x shape {np.shape(xr)} != eps shape {np.shape(er)}")
    a, b = schedule_coeffs(sched, t)
    return _wrap(_like(a, xr) * xr + _like(b, xr) * er, x)


def predict_x(z_t, eps_hat, t, sched: NoiseSchedule):
    """Invert the forward process for x given a noise estimate."""
    zr, er = _raw(z_t), _raw(eps_hat)
    a, b = schedule_coeffs(sched, t)
    if np.any(a <= 0.0):
        raise SingularScheduleError(f"sqrt(alpha_t) = 0 at t={t}")
    return _wrap((zr - _like(b, zr) * er) / _like(a, zr), z_t)


def eps_loss(eps_hat, eps, step=None):
    """Mean squared error between predicted and true noise over all elements."""
    diff = _raw(eps_hat) - _raw(eps)
    loss = (diff * diff).mean()
    if not np.isfinite(float(loss)):
        raise TrainingDiverged(step)
    return loss


def posterior_moments(z_t, x_hat, s, t, sched: NoiseSchedule):
    """Mean and variance of q(z_s | z_t, x) for s < t."""
    s_arr, t_arr = _check_t(s), _check_t(t)
    if np.any(s_arr >= t_arr):
        raise InvalidArgument(f"posterior needs s < t, got s={s}, t={t}")
    lam_s, lam_t = sched.logsnr(s_arr), sched.logsnr(t_arr)
    # 1 - alpha_t / alpha_s in log space keeps precision as s -> t
    one_minus_ats = -np.expm1(log_expit(lam_t) - log_expit(lam_s))
    alpha_ts = 1.0 - one_minus_ats
    one_minus_as, one_minus_at = expit(-lam_s), expit(-lam_t)
    w_z = np.sqrt(alpha_ts) * one_minus_as / one_minus_at
    w_x = np.sqrt(expit(lam_s)) * one_minus_ats / one_minus_at
    var = one_minus_ats * one_minus_as / one_minus_at
    zr, xr = _raw(z_t), _raw(x_hat)
    mean = _like(w_z, zr) * zr + _like(w_x, zr) * xr
    return mean, var


def posterior_sample(z_t, x_hat, s, t, prng: Prng, sched: NoiseSchedule):
    mean, var = posterior_moments(z_t, x_hat, s, t, sched)
    noise = prng.normal(np.shape(mean))
    out = mean + _like(np.sqrt(var), mean) * noise.astype(np.asarray(mean).dtype)
    return _wrap(out, z_t)


def noise_augment(c, tau, prng: Prng, sched: NoiseSchedule, tau_max: float = 1.0):
    """Noise the conditioning image with the forward marginal at level tau.

    Returns ``(c_tau, tau)``; the caller conditions the denoiser on both.
    """
    tau_arr = np.asarray(tau, dtype=np.float64)
    if np.any(tau_arr < 0.0) or np.any(tau_arr > tau_max):
        raise InvalidArgument(f"tau must lie in [0, {tau_max}], got {tau}")
    cr = _raw(c)
    eps = prng.normal(np.shape(cr)).astype(np.asarray(cr).dtype)
    return _wrap(forward_sample(cr, tau_arr, eps, sched), c), tau


def ancestral_sample(denoiser, c_aug, tau, plan: DiffusionStepPlan, prng: Prng,
                     sched: NoiseSchedule, clip_x: bool = True):
    """Generate x by iterating x_hat = predict_x, z_s ~ q(z_s | z_t, x_hat).

    ``denoiser(z_t, t, c_aug, tau)`` returns the noise estimate for the whole
    batch.  Each x_hat is a unit-domain image estimate and is clamped to
    [0, 1] when ``clip_x`` is set; the final step returns x_hat without
    adding noise.
    """
    cr = np.asarray(_raw(c_aug), dtype=np.float64)
    z = prng.normal(cr.shape)
    ts = plan.timesteps
    x_hat = None
    for k in range(plan.num_steps):
        t, s = float(ts[k]), float(ts[k + 1])
        eps_hat = np.asarray(denoiser(z, t, cr, tau))
        if not np.all(np.isfinite(eps_hat)):
            bad = ~np.isfinite(eps_hat)
            items = np.flatnonzero(bad.reshape(len(bad), -1).any(axis=1)) if bad.ndim == 4 else []
            raise SamplingDiverged(k, t, items)
        x_hat = predict_x(z, eps_hat, t, sched)
        if clip_x:
            x_hat = np.clip(x_hat, 0.0, 1.0)
        if s > 0.0:
            z = posterior_sample(z, x_hat, s, t, prng, sched)
    x = np.clip(x_hat, 0.0, 1.0)
    return _wrap(x, c_aug, UNIT)
