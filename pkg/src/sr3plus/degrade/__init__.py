from .jpeg import jpeg_array, jpeg_artifacts, scaled_table
from .kernels import (
    FAMILIES,
    FAMILY_PROBS,
    BlurKernelSpec,
    convolve,
    convolve_array,
    render_kernel,
    sample_blur_spec,
)
from .pipeline import (
    DegradationTrace,
    DegradeConfig,
    adversarial_trace,
    apply_trace,
    benign_trace,
    bicubic_downsample,
    degrade,
    sample_trace,
)
from .resize import resize, resize_array, resize_weights

__all__ = [
    "FAMILIES", "FAMILY_PROBS", "BlurKernelSpec", "DegradationTrace", "DegradeConfig",
    "adversarial_trace", "apply_trace", "benign_trace", "bicubic_downsample", "convolve",
    "convolve_array", "degrade", "jpeg_array", "jpeg_artifacts", "render_kernel", "resize",
    "resize_array", "resize_weights", "sample_blur_spec", "sample_trace", "scaled_table",
]
