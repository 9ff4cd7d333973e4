"""Training runs, t_eval sweeps and the four-arm ablation grid.

Every result is a pure function of a RunConfig and the package source, so
runs are cached on disk under a key built from the config, a digest of the
numerical modules and PIPELINE_VERSION.  Deleting the cache
directory (or passing ``cache_dir=None``) forces recomputation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ARMS, RunConfig
from .core import InvalidArgument, Prng, config_hash
from .data import (
    DatasetManifest,
    build_eval_set,
    build_training_set,
    get_profile,
    synth_texture,
)
from .degrade import DegradeConfig
from .denoiser import (
    DenoiserAdapter,
    TrainState,
    init_params,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    train,
)
from .metrics import FeatureExtractor, MetricsReport, evaluate

log = logging.getLogger(__name__)

# modules whose code determines numerical results
_RESULT_MODULES = ("core", "diffusion", "degrade", "denoiser", "metrics", "data")
# bump when the run logic below (seeding, data wiring) changes results
PIPELINE_VERSION = 1


def source_digest() -> str:
    root = Path(__file__).parent
    h = hashlib.sha256()
    for name in _RESULT_MODULES:
        p = root / name
        files = sorted(p.rglob("*.py")) if p.is_dir() else [root / f"{name}.py"]
        for f in files:
            h.update(f.relative_to(root).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()[:16]


def parse_grid(spec: str) -> list:
    """``"start:stop:step"`` with an inclusive stop, e.g. 0:0.4:0.05 -> 9 values."""
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
    except ValueError:
        raise InvalidArgument(f"grid must be start:stop:step, got {spec!r}") from None
    if step <= 0 or stop < start:
        raise InvalidArgument(f"grid needs step > 0 and stop >= start, got {spec!r}")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    values = [round(start + k * step, 10) for k in range(n)]
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise InvalidArgument("t_eval values must lie in [0, 1]")
    return values


# --- data ----------------------------------------------------------------------


def synthetic_images(cfg: RunConfig, split: str) -> list:
    """In-memory synthetic texture corpus; train and eval draw disjoint streams."""
    n = cfg.data.corpus_images if split == "train" else cfg.data.eval_images
    prng = Prng(cfg.seed).split(f"corpus/{split}")
    return [synth_texture(prng.split(i), cfg.data.corpus_size, cfg.unet.image_channels)
            for i in range(n)]


def training_set(cfg: RunConfig, images: list):
    return build_training_set(images, cfg.data.train_pairs, Prng(cfg.seed).split("pairs"),
                              cfg.scale_profile, DegradeConfig(), cfg.use_degradations)


def eval_set(cfg: RunConfig, images: list, names=None) -> list:
    """Degraded (plus sensor-noise) evaluation pairs; independent of the arm."""
    names = names or [f"synthetic/eval_{i:04d}" for i in range(len(images))]
    manifest = DatasetManifest([{"path": n} for n in names], "eval", get_profile(cfg.scale_profile))
    return build_eval_set(manifest, Prng(cfg.seed).split("evalset"), cfg.data.eval_crops_per_image,
                          cfg.data.eval_hr_size, DegradeConfig(), cfg.data.eval_noise_sigma,
                          images=images)


# --- caching -------------------------------------------------------------------


class RunCache:
    def __init__(self, directory):
        self.dir = None if directory is None else Path(directory)
        self.digest = source_digest()

    def key(self, *parts) -> str:
        return config_hash({"source": self.digest, "pipeline": PIPELINE_VERSION,
                            "parts": list(parts)})

    def path(self, key: str, suffix: str):
        if self.dir is None:
            return None
        self.dir.mkdir(parents=True, exist_ok=True)
        return self.dir / f"{key}{suffix}"

    def get_json(self, key):
        p = self.path(key, ".json")
        return json.loads(p.read_text()) if p is not None and p.exists() else None

    def put_json(self, key, value):
        p = self.path(key, ".json")
        if p is not None:
            p.write_text(json.dumps(value, indent=1, sort_keys=True))


# --- runs ----------------------------------------------------------------------


def train_run(cfg: RunConfig, dataset, callback=None):
    """Seeded init and training; returns ``(model, losses, state)``."""
    model = init_params(Prng(cfg.seed).split("init"), cfg.unet)
    state = TrainState(model, make_optimizer(model, cfg.train_config))
    model, losses = train(model, dataset, cfg.train_config, cfg.schedule,
                          Prng(cfg.seed).split("train"), state=state, callback=callback)
    return model, losses, state


def trained_model(cfg: RunConfig, cache: RunCache, images=None):
    """Train (or load the cached checkpoint for) the run described by ``cfg``."""
    key = cache.key("train", cfg.to_dict())
    ckpt = cache.path(key, ".ckpt")
    losses_path = cache.path(key, ".losses.npy")
    if ckpt is not None and ckpt.exists() and losses_path.exists():
        model, *_ = load_checkpoint(ckpt)
        return model, np.load(losses_path)
    images = images if images is not None else synthetic_images(cfg, "train")
    log.info("training arm=%s seed=%d for %d steps", cfg.arm, cfg.seed, cfg.train.steps)
    model, losses, state = train_run(cfg, training_set(cfg, images))
    if ckpt is not None:
        save_checkpoint(ckpt, model, cfg.train_config, state, {"run_config_hash": cfg.hash()})
        np.save(losses_path, losses)
    return state.sampling_model, losses


def evaluate_model(model, cfg: RunConfig, pairs, t_eval: float) -> MetricsReport:
    """Score one t_eval.  The sampler stream does not depend on t_eval or the
    arm, so comparisons across them share their random numbers."""
    ex = FeatureExtractor(seed=cfg.metrics.feature_seed, feature_dim=cfg.metrics.feature_dim,
                          image_channels=cfg.unet.image_channels)
    report = evaluate(model, pairs, t_eval, cfg.schedule, cfg.sampler, ex,
                      Prng(cfg.seed).split("eval"), get_profile(cfg.scale_profile).magnification)
    report.config_hash = cfg.hash()
    return report


def _cached_eval(model, cfg, pairs, t_eval, cache: RunCache) -> MetricsReport:
    key = cache.key("eval", cfg.to_dict(), float(t_eval))
    hit = cache.get_json(key)
    if hit is not None:
        return MetricsReport(**hit)
    log.info("evaluating arm=%s seed=%d t_eval=%.3f", cfg.arm, cfg.seed, t_eval)
    denoiser = DenoiserAdapter(model) if isinstance(model, torch.nn.Module) else model
    report = evaluate_model(denoiser, cfg, pairs, t_eval)
    cache.put_json(key, report.to_dict())
    return report


def run_sweep(cfg: RunConfig, grid, cache_dir=None, model=None, pairs=None) -> list:
    """Metrics of the run ``cfg`` at every t_eval in ``grid``.

    A supplied ``model`` (a UNet or any denoiser callable) is evaluated
    uncached, since the cache key only describes trained runs.
    """
    cache = RunCache(cache_dir if model is None else None)
    if model is None:
        model, _ = trained_model(cfg, cache)
    if pairs is None:
        pairs = eval_set(cfg, synthetic_images(cfg, "eval"))
    return [_cached_eval(model, cfg, pairs, t, cache) for t in grid]


def run_ablation(cfg: RunConfig, seeds, cache_dir=None, arms=tuple(ARMS)) -> list:
    """Train and evaluate every arm for every seed; one row per (seed, arm)."""
    cache = RunCache(cache_dir)
    rows = []
    for seed in seeds:
        base = replace(cfg, seed=seed)
        pairs = eval_set(base, synthetic_images(base, "eval"))
        train_images = synthetic_images(base, "train")
        for arm in arms:
            run = base.with_arm(arm)
            model, _ = trained_model(run, cache, train_images)
            report = _cached_eval(model, run, pairs, run.t_eval, cache)
            rows.append({"seed": seed, "arm": arm, "use_degradations": run.use_degradations,
                         "use_nca": run.use_nca, **report.to_dict()})
    return rows


def ablation_orderings(rows) -> dict:
    """Per seed: does each qualitative ordering of the ablation hold?"""
    out = {}
    for seed in sorted({r["seed"] for r in rows}):
        by_arm = {r["arm"]: r for r in rows if r["seed"] == seed}
        fd = {a: r["frechet"] for a, r in by_arm.items()}
        others = [a for a in by_arm if a != "sr3"]
        out[seed] = {
            "full_lowest_frechet": fd["full"] == min(fd.values()),
            "sr3_highest_frechet": fd["sr3"] == max(fd.values()),
            "sr3_highest_psnr": all(by_arm["sr3"]["psnr_mean"] > by_arm[a]["psnr_mean"] for a in others),
            "sr3_highest_ssim": all(by_arm["sr3"]["ssim_mean"] > by_arm[a]["ssim_mean"] for a in others),
        }
    return out


def sweep_ordering(reports, low: float = 0.1, high: float = 0.4) -> bool:
    by_t = {round(r.t_eval, 10): r.frechet for r in reports}
    return by_t[low] <= by_t[high]
