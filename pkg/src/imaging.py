"""
Image-domain operations of the degradation model

    y = (x ⊗ k)↓s + n

Images are float64 arrays of shape H×W×C with values in [0, 1]. Public
operations take and return ImagePlane objects, which clamp at construction;
the ``*_array`` helpers are the unclamped internal path used inside
compositions.
"""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage

from src.errors import SizingError
from src.kernels import BlurKernel

logger = logging.getLogger(__name__)

ColorSpace = Literal["RGB", "Y"]


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """H×W×C image in [0, 1]; C is 3 for RGB and 1 for luminance"""

    data: np.ndarray
    color_space: ColorSpace = "RGB"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise SizingError(f"image must be H×W×C, got shape {data.shape}")
        height, width, channels = data.shape
        if height < 1 or width < 1:
            raise SizingError(f"image must be at least 1×1, got {height}×{width}")
        expected = 3 if self.color_space == "RGB" else 1
        if channels != expected:
            raise SizingError(f"{self.color_space} image needs {expected} channel(s), got {channels}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", np.clip(data, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "ImagePlane":
        return ImagePlane(data, self.color_space)


@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise; sigma in [0, 1] intensity units"""

    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


def _check_kernel_fits(shape, kernel: BlurKernel):
    height, width = shape[:2]
    if kernel.size > min(height, width):
        raise SizingError(f"kernel of size {kernel.size} is larger than the {height}×{width} image")


def convolve_array(data: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """
    Two-dimensional convolution of every channel with replicate borders

    Args:
        data: H×W×C array, not clamped
        kernel: K×K array with K odd

    Returns:
        H×W×C array of the same size
    """
    out = np.empty_like(data, dtype=np.float64)
    for c in range(data.shape[2]):
        # mode="nearest" repeats the edge pixel
        out[:, :, c] = ndimage.convolve(data[:, :, c], kernel, mode="nearest")
    return out


def downsample_array(data: np.ndarray, s: int) -> np.ndarray:
    if s < 1:
        raise SizingError(f"scale must be >= 1, got {s}")
    height, width = data.shape[:2]
    if height % s or width % s:
        raise SizingError(f"{height}×{width} image is not divisible by scale {s}; crop it first")
    return data[::s, ::s]


def awgn_array(data: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    if noise.sigma == 0:
        return data.copy()
    rng = np.random.default_rng(noise.seed)
    return data + rng.normal(0.0, noise.sigma, size=data.shape)


def convolve2d(image: ImagePlane, kernel: BlurKernel) -> ImagePlane:
    """Blur an image with a normalized kernel; output has the input's size"""
    _check_kernel_fits(image.data.shape, kernel)
    return image.with_data(convolve_array(image.data, kernel.data))


def downsample_s(image: ImagePlane, s: int) -> ImagePlane:
    """Keep the upper-left pixel of every s×s patch"""
    return image.with_data(downsample_array(image.data, s))


def add_awgn(image: ImagePlane, noise: NoiseSpec) -> ImagePlane:
    """Add seeded Gaussian noise and clamp to [0, 1]"""
    return image.with_data(awgn_array(image.data, noise))


def degrade_array(data: np.ndarray, kernel: BlurKernel, s: int, noise: NoiseSpec) -> np.ndarray:
    _check_kernel_fits(data.shape, kernel)
    return awgn_array(downsample_array(convolve_array(data, kernel.data), s), noise)


def degrade(hr: ImagePlane, kernel: BlurKernel, s: int, noise: NoiseSpec) -> ImagePlane:
    """
    Synthesize a low-resolution observation: blur, s-fold subsample, add noise

    Args:
        hr: high-resolution image with dimensions divisible by s
        kernel: normalized blur kernel no larger than the image
        s: scale factor
        noise: AWGN level and seed

    Returns:
        (H/s)×(W/s) low-resolution image
    """
    return hr.with_data(degrade_array(hr.data, kernel, s, noise))


def crop_to_multiple(image: ImagePlane, s: int) -> ImagePlane:
    """Center-crop so both dimensions are multiples of s"""
    height, width = image.height, image.width
    new_h, new_w = height - height % s, width - width % s
    if new_h == 0 or new_w == 0:
        raise SizingError(f"{height}×{width} image is smaller than scale {s}")
    top, left = (height - new_h) // 2, (width - new_w) // 2
    if (new_h, new_w) != (height, width):
        logger.debug("center-cropping %dx%d to %dx%d for scale %d", height, width, new_h, new_w, s)
    return image.with_data(image.data[top:top + new_h, left:left + new_w])
