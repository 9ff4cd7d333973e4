"""Report figures.  PNGs are written without metadata so reruns are byte-identical."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import ARMS  # noqa: E402
from .core import ImageTensor, write_image  # noqa: E402
from .denoiser import smooth  # noqa: E402


def _save(fig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_loss(losses, path, window: int = 100):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.5, alpha=0.35, color="tab:blue", label="per step")
    ax.plot(steps, smooth(losses, window), lw=1.5, color="tab:blue", label=f"mean of {window}")
    ax.set_xlabel("step")
    ax.set_ylabel("noise-prediction MSE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_sweep(reports, path, title: str = ""):
    """Fréchet score and PSNR against the test-time augmentation level."""
    t = [r.t_eval for r in reports]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(t, [r.frechet for r in reports], "o-", color="tab:red")
    ax.set_xlabel("t_eval")
    ax.set_ylabel("Fréchet feature distance", color="tab:red")
    twin = ax.twinx()
    twin.plot(t, [r.psnr_mean for r in reports], "s--", color="tab:gray")
    twin.set_ylabel("PSNR (dB)", color="tab:gray")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(rows, path):
    """One panel per metric; bars per arm, one bar group per seed."""
    seeds = sorted({r["seed"] for r in rows})
    arms = [a for a in ARMS if any(r["arm"] == a for r in rows)]
    metrics = [("frechet", "Fréchet (lower is better)"), ("psnr_mean", "PSNR dB"),
               ("ssim_mean", "SSIM")]
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.5))
    width = 0.8 / max(len(seeds), 1)
    for ax, (key, label) in zip(axes, metrics):
        for j, seed in enumerate(seeds):
            vals = [next(r[key] for r in rows if r["seed"] == seed and r["arm"] == a) for a in arms]
            ax.bar(np.arange(len(arms)) + (j - (len(seeds) - 1) / 2) * width, vals, width,
                   label=f"seed {seed}")
        ax.set_xticks(np.arange(len(arms)), arms, rotation=20)
        ax.set_title(label)
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def save_grid(rows, path, pad: int = 2):
    """Tile a list of equally sized image rows (lists of H x W x C arrays)."""
    h, w, c = np.asarray(rows[0][0]).shape
    ncols = max(len(r) for r in rows)
    grid = np.ones((len(rows) * (h + pad) + pad, ncols * (w + pad) + pad, c), np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[y : y + h, x : x + w] = np.asarray(img)
    write_image(path, ImageTensor.unit(grid))
