"""Two-stage blur / resize / JPEG degradation with replayable traces."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..core import ImageTensor, InvalidArgument, Prng
from .jpeg import jpeg_array
from .kernels import (
    BlurKernelSpec,
    convolve_array,
    fit_kernel,
    render_kernel,
    sample_blur_spec,
    sample_sinc_spec,
)
from .resize import MODES, resize_array, scaled_dims

STAGE1_SCALE = (0.15, 1.5)
STAGE2_SCALE = (0.3, 1.2)
JPEG_QUALITY = (30, 95)
SINC_POSITIONS = ("before_jpeg", "after_jpeg")


@dataclass(frozen=True)
class DegradeConfig:
    magnification: int = 4
    second_blur_prob: float = 0.8
    subsample_chroma: bool = True

    def to_dict(self):
        return {"magnification": self.magnification, "second_blur_prob": self.second_blur_prob,
                "subsample_chroma": self.subsample_chroma}


@dataclass(frozen=True)
class ResizeStep:
    mode: str
    scale: float


@dataclass(frozen=True)
class Stage1:
    blur: BlurKernelSpec
    resize: ResizeStep
    jpeg_quality: int


@dataclass(frozen=True)
class Stage2:
    blur: BlurKernelSpec | None
    resize: ResizeStep
    sinc: BlurKernelSpec
    sinc_position: str
    jpeg_quality: int


@dataclass(frozen=True)
class DegradationTrace:
    """Every random choice of one pipeline pass.

    The stage-2 resize scale is relative to the final LR size, so the
    closing bicubic resize always bridges a factor in [0.83, 3.3].
    """

    stage1: Stage1
    stage2: Stage2
    final_size: tuple[int, int]
    final_mode: str = field(default="bicubic")

    def to_dict(self) -> dict:
        s1, s2 = self.stage1, self.stage2
        return {
            "stage1": {
                "blur": s1.blur.to_dict(),
                "resize": {"mode": s1.resize.mode, "scale": s1.resize.scale},
                "jpeg_quality": s1.jpeg_quality,
            },
            "stage2": {
                "blur": None if s2.blur is None else s2.blur.to_dict(),
                "resize": {"mode": s2.resize.mode, "scale": s2.resize.scale},
                "sinc": s2.sinc.to_dict(),
                "sinc_position": s2.sinc_position,
                "jpeg_quality": s2.jpeg_quality,
            },
            "final_resize": {"mode": self.final_mode, "target": list(self.final_size)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationTrace":
        a, b, f = d["stage1"], d["stage2"], d["final_resize"]
        stage1 = Stage1(BlurKernelSpec.from_dict(a["blur"]), ResizeStep(**a["resize"]),
                        int(a["jpeg_quality"]))
        stage2 = Stage2(
            None if b["blur"] is None else BlurKernelSpec.from_dict(b["blur"]),
            ResizeStep(**b["resize"]),
            BlurKernelSpec.from_dict(b["sinc"]),
            b["sinc_position"],
            int(b["jpeg_quality"]),
        )
        return cls(stage1, stage2, tuple(f["target"]), f["mode"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DegradationTrace":
        return cls.from_dict(json.loads(text))


def _check_hr(shape, magnification):
    h, w = shape[:2]
    if h % magnification or w % magnification:
        raise InvalidArgument(f"HR size {h}x{w} not divisible by magnification {magnification}")
    if min(h, w) < 8 * magnification:
        raise InvalidArgument(f"HR size {h}x{w} below minimum {8 * magnification} px")
    return h // magnification, w // magnification


def sample_trace(prng: Prng, hr_shape, config: DegradeConfig = DegradeConfig()) -> DegradationTrace:
    target = _check_hr(hr_shape, config.magnification)
    blur1 = sample_blur_spec(prng, 1)
    resize1 = ResizeStep(MODES[int(prng.integers(0, 3))], float(prng.uniform(*STAGE1_SCALE)))
    q1 = int(prng.integers(JPEG_QUALITY[0], JPEG_QUALITY[1] + 1))
    use_blur2 = bool(prng.uniform() < config.second_blur_prob)
    blur2 = sample_blur_spec(prng, 2) if use_blur2 else None
    resize2 = ResizeStep(MODES[int(prng.integers(0, 3))], float(prng.uniform(*STAGE2_SCALE)))
    sinc = sample_sinc_spec(prng)
    position = SINC_POSITIONS[int(prng.integers(0, 2))]
    q2 = int(prng.integers(JPEG_QUALITY[0], JPEG_QUALITY[1] + 1))
    return DegradationTrace(
        Stage1(blur1, resize1, q1),
        Stage2(blur2, resize2, sinc, position, q2),
        target,
    )


def _blur(x, spec):
    return convolve_array(x, fit_kernel(render_kernel(spec), *x.shape[:2]))


def apply_trace(hr: ImageTensor, trace: DegradationTrace,
                config: DegradeConfig = DegradeConfig()) -> ImageTensor:
    """Deterministically replay a trace on an HR image."""
    _check_hr(hr.shape, config.magnification)
    s1, s2 = trace.stage1, trace.stage2
    jpeg = lambda x, q: jpeg_array(np.clip(x, 0.0, 1.0), q, config.subsample_chroma)

    x = _blur(hr.data, s1.blur)
    x = resize_array(x, scaled_dims(*x.shape[:2], s1.resize.scale), s1.resize.mode)
    x = jpeg(x, s1.jpeg_quality)

    if s2.blur is not None:
        x = _blur(x, s2.blur)
    th, tw = trace.final_size
    size2 = (max(1, math.floor(th * s2.resize.scale + 0.5)), max(1, math.floor(tw * s2.resize.scale + 0.5)))
    x = resize_array(x, size2, s2.resize.mode)
    if s2.sinc_position == "before_jpeg":
        x = jpeg(_blur(x, s2.sinc), s2.jpeg_quality)
    else:
        x = _blur(jpeg(x, s2.jpeg_quality), s2.sinc)

    x = resize_array(x, trace.final_size, trace.final_mode)
    return ImageTensor.unit(x)


def degrade(hr: ImageTensor, prng: Prng, config: DegradeConfig = DegradeConfig()):
    """Sample a trace and apply it; returns ``(lr, trace)``."""
    trace = sample_trace(prng, hr.shape, config)
    return apply_trace(hr, trace, config), trace


def benign_trace(hr_shape, magnification: int = 4) -> DegradationTrace:
    """Near-identity trace: no blur, unit scales, quality 95, full-band sinc."""
    target = _check_hr(hr_shape, magnification)
    delta = BlurKernelSpec.delta()
    return DegradationTrace(
        Stage1(delta, ResizeStep("bicubic", 1.0), 95),
        Stage2(delta, ResizeStep("bicubic", 1.0), BlurKernelSpec("sinc", 3, cutoff=math.pi),
               "after_jpeg", 95),
        target,
    )


def adversarial_trace(hr_shape, magnification: int = 4) -> DegradationTrace:
    """Harshest trace: widest blurs, smallest scales, quality 30, narrowest sinc."""
    target = _check_hr(hr_shape, magnification)
    return DegradationTrace(
        Stage1(BlurKernelSpec("gaussian", 11, True, 3.0, 3.0), ResizeStep("bilinear", 0.15), 30),
        Stage2(BlurKernelSpec("gaussian", 11, True, 1.5, 1.5), ResizeStep("bilinear", 0.3),
               BlurKernelSpec("sinc", 11, cutoff=math.pi / 5), "after_jpeg", 30),
        target,
    )


def bicubic_downsample(hr: ImageTensor, magnification: int = 4) -> ImageTensor:
    h, w = _check_hr(hr.shape, magnification)
    return ImageTensor.unit(resize_array(hr.data, (h, w), "bicubic"))
