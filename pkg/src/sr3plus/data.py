"""Corpus manifests, training-pair synthesis and aligned evaluation sets."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    ImageTensor,
    InvalidArgument,
    Prng,
    read_image,
    read_tensor,
    write_image,
    write_tensor,
)
from .degrade import DegradationTrace, DegradeConfig, apply_trace, degrade, resize_array
from .denoiser import TrainingSet

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


class EmptyCorpusError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleProfile:
    hr_crop: int
    lr_size: int
    model_crop: int
    magnification: int = 4

    def __post_init__(self):
        m = self.magnification
        if self.hr_crop != m * self.lr_size:
            raise InvalidArgument(f"hr_crop must be {m} x lr_size")
        if self.model_crop > self.hr_crop or any(v % m for v in (self.hr_crop, self.model_crop)):
            raise InvalidArgument(f"need model_crop <= hr_crop, both divisible by {m}")


PROFILES = {
    "paper": ScaleProfile(400, 100, 256),
    "desk": ScaleProfile(96, 24, 64),
    "tiny": ScaleProfile(48, 12, 32),
}


def get_profile(name_or_profile) -> ScaleProfile:
    if isinstance(name_or_profile, ScaleProfile):
        return name_or_profile
    try:
        return PROFILES[name_or_profile]
    except KeyError:
        raise InvalidArgument(f"unknown scale profile {name_or_profile!r}; "
                              f"choose from {sorted(PROFILES)}") from None


@dataclass
class DatasetManifest:
    entries: list
    split: str = "train"
    profile: ScaleProfile = PROFILES["desk"]
    skipped: int = 0
    errors: list = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d["profile"] = ScaleProfile(**d["profile"])
        return cls(**d)

    def load(self, i: int) -> ImageTensor:
        return read_image(self.entries[i]["path"])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def ingest(directory, profile="desk", split: str = "train", lr_directory=None) -> DatasetManifest:
    """Index every readable image under ``directory``.

    With ``lr_directory`` the corpus is paired: each HR file needs an LR file
    of the same name whose dims are the HR dims divided by the magnification.
    """
    profile = get_profile(profile)
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    entries, errors, skipped = [], [], 0
    for path in files:
        try:
            img = read_image(path)
        except Exception as exc:  # corrupt files are recorded and skipped
            errors.append({"path": str(path), "error": f"{type(exc).__name__}: {exc}"})
            continue
        if min(img.height, img.width) < profile.hr_crop:
            skipped += 1
            continue
        entry = {"path": str(path), "sha256": _sha256(path), "dims": list(img.shape)}
        if lr_directory is not None:
            lr_path = Path(lr_directory) / path.name
            try:
                lr = read_image(lr_path)
            except Exception as exc:
                errors.append({"path": str(lr_path), "error": f"{type(exc).__name__}: {exc}"})
                continue
            m = profile.magnification
            if (lr.height * m, lr.width * m) != (img.height, img.width):
                errors.append({"path": str(lr_path), "error": "LR dims do not match HR / magnification"})
                continue
            entry.update(lr_path=str(lr_path), lr_sha256=_sha256(lr_path), lr_dims=list(lr.shape))
        entries.append(entry)
    if skipped:
        log.warning("skipped %d images smaller than %d px", skipped, profile.hr_crop)
    for e in errors:
        log.warning("could not read %s: %s", e["path"], e["error"])
    if not entries:
        raise EmptyCorpusError(f"no usable images in {directory}")
    return DatasetManifest(entries, split, profile, skipped, errors)


def _random_crop(img: np.ndarray, size: int, prng: Prng, step: int = 1):
    h, w = img.shape[:2]
    if min(h, w) < size:
        raise InvalidArgument(f"image {h}x{w} smaller than crop {size}")
    y = int(prng.integers(0, (h - size) // step + 1)) * step
    x = int(prng.integers(0, (w - size) // step + 1)) * step
    return img[y : y + size, x : x + size], (x, y)


def _center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    y, x = (h - size) // 2, (w - size) // 2
    return img[y : y + size, x : x + size]


def make_lr(hr: ImageTensor, prng: Prng, degrade_config: DegradeConfig = DegradeConfig(),
            use_degradations: bool = True, trace: DegradationTrace | None = None):
    """LR counterpart of an HR crop: the degradation pipeline, or plain bicubic."""
    if trace is not None:
        return apply_trace(hr, trace, degrade_config), trace
    if use_degradations:
        return degrade(hr, prng, degrade_config)
    m = degrade_config.magnification
    return ImageTensor.unit(resize_array(hr.data, (hr.height // m, hr.width // m), "bicubic")), None


def make_training_pair(hr_image: ImageTensor, prng: Prng, profile="desk",
                       degrade_config: DegradeConfig = DegradeConfig(),
                       use_degradations: bool = True, trace: DegradationTrace | None = None):
    """Crop, degrade, upsample back and centre-crop; returns ``(x, c_upsampled)``."""
    p = get_profile(profile)
    crop, _ = _random_crop(hr_image.data, p.hr_crop, prng.split("crop"))
    hr = ImageTensor.unit(crop)
    lr, _ = make_lr(hr, prng.split("degrade"), degrade_config, use_degradations, trace)
    up = resize_array(lr.data, (p.hr_crop, p.hr_crop), "bicubic")
    return (ImageTensor.unit(_center_crop(hr.data, p.model_crop)),
            ImageTensor.unit(_center_crop(up, p.model_crop)))


def build_training_set(images, n_pairs: int, prng: Prng, profile="desk",
                       degrade_config: DegradeConfig = DegradeConfig(),
                       use_degradations: bool = True) -> TrainingSet:
    """Synthesize ``n_pairs`` training pairs cycling over ``images``."""
    xs, cs = [], []
    for i in range(n_pairs):
        x, c = make_training_pair(images[i % len(images)], prng.split(i), profile,
                                  degrade_config, use_degradations)
        xs.append(x.data)
        cs.append(c.data)
    return TrainingSet(np.stack(xs), np.stack(cs))


@dataclass
class EvalPair:
    lr: ImageTensor
    hr: ImageTensor
    source_id: str
    crop_origin: tuple
    trace: dict | None = None


def add_sensor_noise(lr: ImageTensor, prng: Prng, sigma_range) -> ImageTensor:
    """Additive Gaussian noise with sigma drawn from ``sigma_range`` (unit scale)."""
    sigma = prng.uniform(*sigma_range)
    return ImageTensor.unit(lr.data + sigma * prng.normal(lr.shape))


def build_eval_set(manifest: DatasetManifest, prng: Prng, n_crops_per_image: int = 25,
                   hr_size: int | None = None, degrade_config: DegradeConfig = DegradeConfig(),
                   noise_sigma=None, images=None) -> list:
    """Aligned (LR, HR) crops.

    Paired corpora are cropped at corresponding coordinates.  HR-only corpora
    get their LR from the degradation pipeline (trace kept per pair), plus
    optional sensor noise with sigma in ``noise_sigma`` to stand in for
    camera captures.  ``images`` may pre-supply the loaded HR images.
    """
    if not manifest.entries:
        raise EmptyCorpusError("manifest has no entries")
    m = manifest.profile.magnification
    hr_size = hr_size or manifest.profile.model_crop
    if hr_size % m:
        raise InvalidArgument(f"eval crop {hr_size} not divisible by {m}")
    pairs = []
    for i, entry in enumerate(manifest.entries):
        hr_img = images[i] if images is not None else read_image(entry["path"])
        lr_img = read_image(entry["lr_path"]) if "lr_path" in entry else None
        for k in range(n_crops_per_image):
            rng = prng.split(f"{i}/{k}")
            source = Path(entry["path"]).stem
            if lr_img is not None:
                lr_crop, (x, y) = _random_crop(lr_img.data, hr_size // m, rng)
                hr_crop = hr_img.data[y * m : (y + hr_size // m) * m, x * m : (x + hr_size // m) * m]
                pairs.append(EvalPair(ImageTensor.unit(lr_crop), ImageTensor.unit(hr_crop), source,
                                      (x * m, y * m)))
                continue
            crop, origin = _random_crop(hr_img.data, hr_size, rng.split("crop"))
            hr = ImageTensor.unit(crop)
            lr, trace = degrade(hr, rng.split("degrade"), degrade_config)
            if noise_sigma is not None:
                lr = add_sensor_noise(lr, rng.split("noise"), noise_sigma)
            pairs.append(EvalPair(lr, hr, source, origin, trace.to_dict()))
    return pairs


def save_eval_set(directory, pairs) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = []
    for i, p in enumerate(pairs):
        write_tensor(d / f"{i:05d}_lr.tsr", p.lr)
        write_tensor(d / f"{i:05d}_hr.tsr", p.hr)
        index.append({"id": i, "lr": f"{i:05d}_lr.tsr", "hr": f"{i:05d}_hr.tsr",
                      "source_id": p.source_id, "crop_origin": list(p.crop_origin),
                      "trace": p.trace})
    (d / "index.json").write_text(json.dumps({"pairs": index}, indent=1, sort_keys=True))


def load_eval_set(directory) -> list:
    d = Path(directory)
    index = d / "index.json"
    if not index.exists():
        raise FileNotFoundError(f"no eval set index at {index}")
    out = []
    for e in json.loads(index.read_text())["pairs"]:
        out.append(EvalPair(read_tensor(d / e["lr"]), read_tensor(d / e["hr"]), e["source_id"],
                            tuple(e["crop_origin"]), e.get("trace")))
    return out


# --- synthetic texture corpus ---------------------------------------------------


def _grid(size):
    ax = np.arange(size, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="ij")


def synth_texture(prng: Prng, size: int = 128, channels: int = 3) -> ImageTensor:
    """A random composite of gratings, checkers, dots and hard-edged shapes."""
    yy, xx = _grid(size)
    img = np.zeros((size, size, channels))
    base = prng.uniform(0.2, 0.8, channels)
    img += base
    for layer in range(3):
        rng = prng.split(layer)
        kind = int(rng.integers(0, 4))
        theta = rng.uniform(0, np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        v = -xx * np.sin(theta) + yy * np.cos(theta)
        period = rng.uniform(2.5, 12.0)
        if kind == 0:
            pattern = np.sin(2 * np.pi * u / period + rng.uniform(0, 2 * np.pi))
        elif kind == 1:
            pattern = np.sign(np.sin(np.pi * u / period) * np.sin(np.pi * v / period))
        elif kind == 2:
            cu = np.mod(u, period) - period / 2
            cv = np.mod(v, period) - period / 2
            pattern = np.where(cu**2 + cv**2 < (0.3 * period) ** 2, 1.0, -1.0)
        else:
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(size / 8, size / 2)
            pattern = np.where((yy - cy) ** 2 + (xx - cx) ** 2 < r * r, 1.0, -1.0)
        weight = rng.uniform(0.05, 0.25, channels)
        img += weight * pattern[:, :, None]
    return ImageTensor.unit(img)


def write_synthetic_corpus(directory, n_images: int, size: int, seed: int, fmt: str = "png") -> list:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    prng = Prng(seed).split("corpus")
    paths = []
    for i in range(n_images):
        path = d / f"tex_{i:04d}.{fmt}"
        write_image(path, synth_texture(prng.split(i), size))
        paths.append(path)
    return paths
