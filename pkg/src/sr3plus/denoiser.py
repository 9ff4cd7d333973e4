"""Attention-free convolutional UNet noise predictor and its training loop.

Inputs are NCHW torch tensors.  The noisy image z_t and the upsampled,
noise-augmented conditioning image c_tau are concatenated on the channel
axis; the diffusion time t and the augmentation level tau each get a
sinusoidal embedding and their own MLP, and the two projections are added
inside every residual block.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import InvalidArgument, Prng, config_hash, read_archive, write_archive
from .diffusion import NoiseSchedule, TrainingDiverged, schedule_coeffs


@dataclass(frozen=True)
class UNetConfig:
    image_channels: int = 3
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    res_blocks_per_level: int = 2
    embedding_dim: int = 64
    norm_groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if self.image_channels not in (1, 3):
            raise InvalidArgument("image_channels must be 1 or 3")
        if min(self.base_channels, self.res_blocks_per_level, self.embedding_dim) < 1:
            raise InvalidArgument("UNet sizes must be positive")
        if self.embedding_dim % 2:
            raise InvalidArgument("embedding_dim must be even")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.norm_groups:
                raise InvalidArgument(f"{self.base_channels * m} channels not divisible into "
                                      f"{self.norm_groups} groups")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def to_dict(self):
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 50_000
    learning_rate: float = 1e-4
    warmup_steps: int = 1000
    grad_clip_norm: float = 1.0
    tau_max: float = 0.5
    use_nca: bool = True
    log_every: int = 0
    ema_decay: float = 0.0  # 0 disables the moving average of weights

    def __post_init__(self):
        if min(self.batch_size, self.steps) < 1 or self.learning_rate <= 0:
            raise InvalidArgument("batch_size, steps and learning_rate must be positive")
        if self.warmup_steps < 0 or self.grad_clip_norm <= 0:
            raise InvalidArgument("warmup_steps must be >= 0 and grad_clip_norm > 0")
        if not 0.0 <= self.tau_max <= 1.0:
            raise InvalidArgument("tau_max must lie in [0, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise InvalidArgument("ema_decay must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


def sinusoidal_embedding(x: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=x.dtype) / half)
    args = scale * x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        g, e = cfg.norm_groups, cfg.embedding_dim
        chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.t_proj = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.tau_proj = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.stem = nn.Conv2d(2 * cfg.image_channels, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        skips, ch = [chans[0]], chans[0]
        for level, c in enumerate(chans):
            for _ in range(cfg.res_blocks_per_level):
                self.down.append(ResBlock(ch, c, e, g))
                ch = c
                skips.append(ch)
            if level < len(chans) - 1:
                self.down.append(Downsample(ch))
                skips.append(ch)
        self.mid = ResBlock(ch, ch, e, g)

        self.up = nn.ModuleList()
        for level, c in reversed(list(enumerate(chans))):
            for _ in range(cfg.res_blocks_per_level + 1):
                self.up.append(ResBlock(ch + skips.pop(), c, e, g))
                ch = c
            if level > 0:
                self.up.append(Upsample(ch))
        self.out_norm = nn.GroupNorm(g, ch)
        self.out = nn.Conv2d(ch, cfg.image_channels, 3, padding=1)

    def embed(self, t, tau):
        e = self.cfg.embedding_dim
        return self.t_proj(sinusoidal_embedding(t, e)) + self.tau_proj(sinusoidal_embedding(tau, e))

    def forward(self, z_t, t, c_tau, tau):
        n, _, h, w = z_t.shape
        div = 2 ** (self.cfg.levels - 1)
        if h % div or w % div:
            raise InvalidArgument(f"spatial size {h}x{w} must be divisible by {div}")
        if c_tau.shape != z_t.shape:
            raise InvalidArgument(f"conditioning {tuple(c_tau.shape)} != latent {tuple(z_t.shape)}")
        t = torch.as_tensor(t, dtype=z_t.dtype).reshape(-1).expand(n)
        tau = torch.as_tensor(tau, dtype=z_t.dtype).reshape(-1).expand(n)
        emb = self.embed(t, tau)

        x = self.stem(torch.cat([z_t, c_tau], dim=1))
        hs = [x]
        for layer in self.down:
            x = layer(x, emb) if isinstance(layer, ResBlock) else layer(x)
            hs.append(x)
        x = self.mid(x, emb)
        for layer in self.up:
            if isinstance(layer, ResBlock):
                x = layer(torch.cat([x, hs.pop()], dim=1), emb)
            else:
                x = layer(x)
        return self.out(F.silu(self.out_norm(x)))


def init_params(prng: Prng, cfg: UNetConfig, dtype=torch.float32) -> UNet:
    """Build a UNet with seeded fan-in scaled weights.

    Each parameter draws from its own child stream named by its path, so
    the result does not depend on module registration order.  The last conv
    of every residual branch and the output conv start at zero, which makes
    every block an identity-on-skip map and the whole net output zero.
    """
    model = UNet(cfg).to(dtype)
    zero_init = {n for n, _ in model.named_modules() if n.endswith("conv2") or n == "out"}
    with torch.no_grad():
        for name, p in model.named_parameters():
            module, _, kind = name.rpartition(".")
            if kind == "bias" or module in zero_init:
                p.zero_()
            elif "norm" in module:
                p.fill_(1.0)
            else:
                fan_in = int(np.prod(p.shape[1:]))
                w = prng.split(name).normal(tuple(p.shape)) / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(w))
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def gradients(model: nn.Module, loss: torch.Tensor, step=None) -> dict:
    """Reverse-mode gradients of ``loss`` for every parameter, keyed by path."""
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for n, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise TrainingDiverged(step, f"non-finite gradient for {n}")
        out[n] = g
    return out


@dataclass
class TrainingSet:
    """Aligned (HR target, upsampled LR conditioning) pairs, N x H x W x C."""

    x: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.x.shape != self.c.shape or self.x.ndim != 4:
            raise InvalidArgument(f"pair shapes differ: {self.x.shape} vs {self.c.shape}")

    def __len__(self):
        return len(self.x)


def _nchw(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(a, -1, 1))).to(dtype)


def _nhwc(t: torch.Tensor) -> np.ndarray:
    return np.moveaxis(t.detach().cpu().numpy(), 1, -1)


@dataclass
class TrainState:
    model: UNet
    optimizer: torch.optim.Optimizer
    step: int = 0
    losses: list = field(default_factory=list)
    ema: UNet | None = None

    @property
    def sampling_model(self) -> UNet:
        """The weights to sample with: the moving average when one is kept."""
        return self.model if self.ema is None else self.ema


@torch.no_grad()
def update_ema(state: TrainState, decay: float) -> None:
    if state.ema is None:
        state.ema = copy.deepcopy(state.model)
        return
    for e, p in zip(state.ema.parameters(), state.model.parameters()):
        e.mul_(decay).add_(p, alpha=1.0 - decay)


def make_optimizer(model: UNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)


def training_step(state: TrainState, batch: TrainingSet, cfg: TrainConfig, sched: NoiseSchedule,
                  prng: Prng) -> float:
    model, opt, step = state.model, state.optimizer, state.step
    n = len(batch)
    t = prng.uniform(0.0, 1.0, n)
    tau = prng.uniform(0.0, cfg.tau_max, n) if cfg.use_nca else np.zeros(n)
    eps = prng.normal(batch.x.shape)
    x, c = batch.x.astype(np.float64), batch.c.astype(np.float64)
    if cfg.use_nca:
        a_tau, b_tau = (v[:, None, None, None] for v in schedule_coeffs(sched, tau))
        c = a_tau * c + b_tau * prng.normal(c.shape)
    a_t, b_t = (v[:, None, None, None] for v in schedule_coeffs(sched, t))
    z = a_t * x + b_t * eps

    dt = next(model.parameters()).dtype
    eps_hat = model(_nchw(z, dt), torch.from_numpy(t).to(dt), _nchw(c, dt), torch.from_numpy(tau).to(dt))
    loss = F.mse_loss(eps_hat, _nchw(eps, dt))
    if not torch.isfinite(loss):
        raise TrainingDiverged(step, f"t={t.tolist()}, tau={tau.tolist()}")
    grads = gradients(model, loss, step)
    for name, p in model.named_parameters():
        p.grad = grads[name]
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
    warm = 1.0 if cfg.warmup_steps == 0 else min(1.0, (step + 1) / cfg.warmup_steps)
    for group in opt.param_groups:
        group["lr"] = cfg.learning_rate * warm
    opt.step()
    if cfg.ema_decay > 0:
        update_ema(state, cfg.ema_decay)
    state.step += 1
    value = loss.item()
    state.losses.append(value)
    return value


def train(model: UNet, dataset: TrainingSet, cfg: TrainConfig, sched: NoiseSchedule, prng: Prng,
          state: TrainState | None = None, callback=None):
    """Train for ``cfg.steps`` steps; returns ``(model, per-step losses)``.

    Batches are drawn with replacement from ``dataset``.  ``callback(state)``
    runs after every step when given.  The returned model holds the raw
    weights; ``state.sampling_model`` has the moving average when enabled.
    """
    state = state or TrainState(model, make_optimizer(model, cfg))
    model.train()
    while state.step < cfg.steps:
        step_rng = prng.split(state.step)
        idx = step_rng.integers(0, len(dataset), cfg.batch_size)
        batch = TrainingSet(dataset.x[idx], dataset.c[idx])
        training_step(state, batch, cfg, sched, step_rng)
        if callback is not None:
            callback(state)
    model.eval()
    return model, np.asarray(state.losses)


def smooth(values, window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


class DenoiserAdapter:
    """Numpy NHWC front end for a UNet, as used by the ancestral sampler."""

    def __init__(self, model: UNet, batch_size: int = 64):
        self.model = model.eval()
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, z_t, t, c_tau, tau):
        n = len(z_t)
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,))
        out = []
        for i in range(0, n, self.batch_size):
            j = slice(i, i + self.batch_size)
            m = len(z_t[j])
            e = self.model(_nchw(z_t[j]), torch.full((m,), float(t)), _nchw(c_tau[j]),
                           torch.from_numpy(tau[j].copy()).float())
            out.append(_nhwc(e))
        return np.concatenate(out).astype(np.float64)


# --- checkpoints ---------------------------------------------------------------


def _meta(unet_cfg: UNetConfig, train_cfg: TrainConfig | None, extra: dict | None):
    meta = {"unet": unet_cfg.to_dict(), "train": None if train_cfg is None else train_cfg.to_dict()}
    meta["config_hash"] = config_hash(meta)
    meta.update(extra or {})
    return meta


def save_checkpoint(path, model: UNet, train_cfg: TrainConfig | None = None,
                    state: TrainState | None = None, extra: dict | None = None) -> None:
    tensors = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    step = 0
    if state is not None:
        step = state.step
        names = [n for n, _ in model.named_parameters()]
        opt_state = state.optimizer.state_dict()["state"]
        for i, n in enumerate(names):
            if i in opt_state:
                tensors[f"adam_m/{n}"] = opt_state[i]["exp_avg"].numpy()
                tensors[f"adam_v/{n}"] = opt_state[i]["exp_avg_sq"].numpy()
                tensors[f"adam_step/{n}"] = np.asarray([float(opt_state[i]["step"])])
        if state.ema is not None:
            tensors.update({f"ema/{k}": v.detach().numpy() for k, v in state.ema.state_dict().items()})
    meta = _meta(model.cfg, train_cfg, {"step": step, **(extra or {})})
    write_archive(Path(path), tensors, meta)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, weights: str = "ema"):
    """Returns ``(model, train_cfg, meta, optimizer_tensors)``.

    ``weights="ema"`` loads the moving-average weights when the checkpoint has
    them (the ones to sample with); ``"raw"`` loads the training weights, as
    needed to resume.
    """
    if weights not in ("ema", "raw"):
        raise InvalidArgument(f"weights must be 'ema' or 'raw', got {weights!r}")
    tensors, meta = read_archive(Path(path))
    try:
        unet_cfg = UNetConfig(**meta["unet"])
        train_cfg = None if meta.get("train") is None else TrainConfig(**meta["train"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config unreadable: {exc}") from None
    if _meta(unet_cfg, train_cfg, None)["config_hash"] != meta.get("config_hash"):
        raise CheckpointError("checkpoint config hash mismatch")
    model = UNet(unet_cfg)
    prefix = "ema/" if weights == "ema" and any(k.startswith("ema/") for k in tensors) else "param/"
    model.load_state_dict(_state_dict(tensors, prefix))
    model.eval()
    opt = {k: v for k, v in tensors.items() if not k.startswith(prefix)}
    return model, train_cfg, meta, opt


def _state_dict(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items()
            if k.startswith(prefix)}


def restore_optimizer(model: UNet, cfg: TrainConfig, opt_tensors: dict, step: int) -> TrainState:
    """Rebuild the training state; ``model`` must hold the raw weights."""
    opt = make_optimizer(model, cfg)
    names = [n for n, _ in model.named_parameters()]
    state = {}
    for i, n in enumerate(names):
        if f"adam_m/{n}" in opt_tensors:
            state[i] = {
                "step": torch.tensor(float(opt_tensors[f"adam_step/{n}"][0])),
                "exp_avg": torch.from_numpy(opt_tensors[f"adam_m/{n}"].copy()),
                "exp_avg_sq": torch.from_numpy(opt_tensors[f"adam_v/{n}"].copy()),
            }
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)
    ema = None
    if any(k.startswith("ema/") for k in opt_tensors):
        ema = copy.deepcopy(model)
        ema.load_state_dict(_state_dict(opt_tensors, "ema/"))
    return TrainState(model, opt, step, ema=ema)
