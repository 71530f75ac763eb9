"""
Blur-kernel synthesis and PCA reduction.

Kernels are sampled at the integer pixel centres of a size×size grid whose
centre is ((size-1)/2, (size-1)/2); x runs along columns and y along rows.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from src.errors import KernelError, SizingError

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-6

# Gaussian8 width ranges per scale factor
GAUSSIAN8_RANGES = {
    2: (0.80, 1.60),
    3: (1.35, 2.40),
    4: (1.80, 3.20),
}
GAUSSIAN8_SIZE = 21


@dataclass(frozen=True, eq=False)
class BlurKernel:
    """Non-negative size×size kernel summing to one"""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise KernelError(f"kernel must be square, got shape {data.shape}")
        if data.shape[0] % 2 == 0:
            raise KernelError(f"kernel size must be odd, got {data.shape[0]}")
        if not np.all(np.isfinite(data)):
            raise KernelError("kernel contains non-finite values")
        if np.any(data < 0):
            raise KernelError(f"kernel has negative entries (min {data.min():.3e})")
        total = float(data.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise KernelError(f"kernel must sum to one, sums to {total:.8f}")
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @classmethod
    def normalized(cls, data: np.ndarray) -> "BlurKernel":
        data = np.asarray(data, dtype=np.float64)
        return cls(data / data.sum())


@dataclass(frozen=True, eq=False)
class ReducedKernel:
    """PCA coordinates of a flattened kernel"""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(coords)):
            raise KernelError("reduced kernel contains non-finite values")
        object.__setattr__(self, "coords", coords)

    @property
    def d(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True, eq=False)
class PcaBasis:
    """Mean kernel plus d orthonormal principal directions, both flattened row-major"""

    mean: np.ndarray
    components: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        components = np.atleast_2d(np.asarray(self.components, dtype=np.float64))
        if components.shape[1] != mean.shape[0]:
            raise SizingError(f"components have {components.shape[1]} columns but mean has {mean.shape[0]} entries")
        size = math.isqrt(mean.shape[0])
        if size * size != mean.shape[0] or size % 2 == 0:
            raise SizingError(f"basis dimension {mean.shape[0]} is not an odd square")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", components)

    @property
    def d(self) -> int:
        return self.components.shape[0]

    @property
    def kernel_size(self) -> int:
        return math.isqrt(self.mean.shape[0])


class KernelFamilySpec(BaseModel):
    """Parameter ranges of one kernel family"""

    model_config = ConfigDict(frozen=True)

    family: Literal["isotropic", "anisotropic"]
    size: int
    sigma_range: Optional[Tuple[float, float]] = None
    axis_range: Optional[Tuple[float, float]] = None
    rotation_range: Tuple[float, float] = (-math.pi, math.pi)
    mult_noise_max: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> "KernelFamilySpec":
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError("kernel size must be a positive odd integer")
        widths = self.sigma_range if self.family == "isotropic" else self.axis_range
        if widths is None:
            needed = "sigma_range" if self.family == "isotropic" else "axis_range"
            raise ValueError(f"{self.family} family needs {needed}")
        if not 0 < widths[0] <= widths[1]:
            raise ValueError(f"width interval must satisfy 0 < low <= high, got {widths}")
        if not 0.0 <= self.mult_noise_max <= 1.0:
            raise ValueError("mult_noise_max must lie in [0, 1]")
        return self


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return x - c, y - c


def _check_size(size: int):
    if size < 1 or size % 2 == 0:
        raise KernelError(f"kernel size must be a positive odd integer, got {size}")


def dirac_kernel(size: int) -> BlurKernel:
    """Identity kernel: one at the centre, zeros elsewhere"""
    _check_size(size)
    data = np.zeros((size, size))
    data[size // 2, size // 2] = 1.0
    return BlurKernel(data)


def isotropic_gaussian(size: int, sigma: float) -> BlurKernel:
    """
    Isotropic Gaussian sampled on the pixel grid and normalized to sum one

    Args:
        size: odd kernel size
        sigma: kernel width in pixels

    Returns:
        BlurKernel
    """
    _check_size(size)
    if not sigma > 0:
        raise KernelError(f"sigma must be > 0, got {sigma}")
    x, y = _grid(size)
    return BlurKernel.normalized(np.exp(-(x ** 2 + y ** 2) / (2.0 * sigma ** 2)))


def anisotropic_gaussian(
    size: int,
    ax1: float,
    ax2: float,
    theta: float,
    mult_noise_max: float = 0.0,
    seed: int = 0,
) -> BlurKernel:
    """
    Rotated bivariate Gaussian with optional uniform multiplicative noise

    The covariance is R(theta) diag(ax1², ax2²) R(theta)ᵀ. Each pixel is then
    multiplied by an independent factor drawn from [1 - mult_noise_max, 1]
    and the result is normalized.

    Args:
        size: odd kernel size
        ax1: standard deviation along the rotated x axis
        ax2: standard deviation along the rotated y axis
        theta: rotation in radians, within [-pi, pi]
        mult_noise_max: largest relative attenuation per pixel
        seed: seed of the noise generator

    Returns:
        BlurKernel
    """
    _check_size(size)
    if not (ax1 > 0 and ax2 > 0):
        raise KernelError(f"axis lengths must be > 0, got ({ax1}, {ax2})")
    if abs(theta) > math.pi + 1e-12:
        raise KernelError(f"theta must lie in [-pi, pi], got {theta}")
    if not 0.0 <= mult_noise_max <= 1.0:
        raise KernelError(f"mult_noise_max must lie in [0, 1], got {mult_noise_max}")

    rotation = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    covariance = rotation @ np.diag([ax1 ** 2, ax2 ** 2]) @ rotation.T
    inverse = np.linalg.inv(covariance)

    x, y = _grid(size)
    quad = inverse[0, 0] * x * x + 2.0 * inverse[0, 1] * x * y + inverse[1, 1] * y * y
    data = np.exp(-0.5 * quad)

    if mult_noise_max > 0:
        rng = np.random.default_rng(seed)
        data = data * rng.uniform(1.0 - mult_noise_max, 1.0, size=data.shape)
    return BlurKernel.normalized(data)


def gaussian8_sigmas(scale: int) -> np.ndarray:
    if scale not in GAUSSIAN8_RANGES:
        raise KernelError(f"Gaussian8 is defined for scales {sorted(GAUSSIAN8_RANGES)}, got {scale}")
    low, high = GAUSSIAN8_RANGES[scale]
    return np.linspace(low, high, 8)


def gaussian8(scale: int) -> List[BlurKernel]:
    """The 8 evenly spaced isotropic test kernels (size 21) for a scale factor"""
    return [isotropic_gaussian(GAUSSIAN8_SIZE, float(sigma)) for sigma in gaussian8_sigmas(scale)]


def sample_kernel(spec: KernelFamilySpec, rng: np.random.Generator) -> Tuple[BlurKernel, Dict[str, Any]]:
    """
    Draw one kernel from a family

    Args:
        spec: family and parameter ranges
        rng: generator owned by the caller

    Returns:
        tuple of (kernel, parameters used)
    """
    if spec.family == "isotropic":
        sigma = float(rng.uniform(*spec.sigma_range))
        return isotropic_gaussian(spec.size, sigma), {"family": "isotropic", "sigma": sigma}

    ax1 = float(rng.uniform(*spec.axis_range))
    ax2 = float(rng.uniform(*spec.axis_range))
    theta = float(rng.uniform(*spec.rotation_range))
    noise_seed = int(rng.integers(0, 2 ** 31 - 1))
    kernel = anisotropic_gaussian(spec.size, ax1, ax2, theta, spec.mult_noise_max, noise_seed)
    params = {"family": "anisotropic", "ax1": ax1, "ax2": ax2, "theta": theta, "noise_seed": noise_seed}
    return kernel, params


def setting_family(setting: int, scale: int) -> KernelFamilySpec:
    """
    Training kernel family of an experimental setting

    Setting 1 draws isotropic widths from [0.2, 4.0] / [0.2, 3.0] / [0.2, 2.0]
    for ×4 / ×3 / ×2 at size 21. Setting 2 draws anisotropic axes from
    (0.6, 5) with 25% multiplicative noise at size 11 (×2) or 31 (×4).
    Scale 1 reuses the ×2 ranges; Setting 2 ×3 uses size 21.
    """
    if scale not in (1, 2, 3, 4):
        raise KernelError(f"unsupported scale {scale}")
    if setting == 1:
        high = {1: 2.0, 2: 2.0, 3: 3.0, 4: 4.0}[scale]
        return KernelFamilySpec(family="isotropic", size=21, sigma_range=(0.2, high))
    if setting == 2:
        size = {1: 11, 2: 11, 3: 21, 4: 31}[scale]
        return KernelFamilySpec(
            family="anisotropic", size=size, axis_range=(0.6, 5.0), mult_noise_max=0.25,
        )
    raise KernelError(f"unknown setting {setting}; expected 1 or 2")


def _flatten(kernel: Union[BlurKernel, np.ndarray]) -> np.ndarray:
    data = kernel.data if isinstance(kernel, BlurKernel) else np.asarray(kernel, dtype=np.float64)
    return data.reshape(-1)


def pca_fit(samples: Sequence[Union[BlurKernel, np.ndarray]], d: int) -> PcaBasis:
    """
    Fit the top-d principal directions of flattened kernels

    Args:
        samples: kernels of one common size
        d: number of components kept

    Returns:
        PcaBasis with the sample mean
    """
    if d < 1:
        raise KernelError(f"PCA dimension must be >= 1, got {d}")
    if len(samples) < d:
        raise KernelError(f"need at least {d} samples to fit {d} components, got {len(samples)}")
    sizes = {np.shape(s.data if isinstance(s, BlurKernel) else s) for s in samples}
    if len(sizes) != 1:
        raise SizingError(f"all samples must share one size, got {sorted(sizes)}")

    matrix = np.stack([_flatten(s) for s in samples])
    if d > matrix.shape[1]:
        raise KernelError(f"PCA dimension {d} exceeds the kernel dimension {matrix.shape[1]}")
    mean = matrix.mean(axis=0)
    _, _, vt = np.linalg.svd(matrix - mean, full_matrices=False)
    components = vt[:d].copy()

    # fix SVD sign ambiguity: largest-magnitude entry of every row positive
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(d), pivots])
    signs[signs == 0] = 1.0
    components *= signs[:, None]

    logger.info("fitted PCA basis: %d samples, %d -> %d dims", matrix.shape[0], matrix.shape[1], d)
    return PcaBasis(mean=mean, components=components)


def pca_reduce(kernel: Union[BlurKernel, np.ndarray], basis: PcaBasis) -> ReducedKernel:
    """Project a kernel onto the basis: components · (flatten(kernel) - mean)"""
    flat = _flatten(kernel)
    if flat.shape[0] != basis.mean.shape[0]:
        raise SizingError(
            f"kernel has {flat.shape[0]} entries but the basis expects {basis.kernel_size}×{basis.kernel_size}"
        )
    return ReducedKernel(basis.components @ (flat - basis.mean))


def pca_expand(reduced: Union[ReducedKernel, np.ndarray], basis: PcaBasis) -> np.ndarray:
    """
    Reconstruct a kernel from reduced coordinates.

    The result is a reconstruction, not a synthesis: it is not renormalized
    and may hold small negative entries, so it is returned as a plain array.
    """
    coords = reduced.coords if isinstance(reduced, ReducedKernel) else np.asarray(reduced, dtype=np.float64)
    if coords.shape[0] != basis.d:
        raise SizingError(f"reduced kernel has {coords.shape[0]} coordinates, basis has {basis.d}")
    flat = basis.mean + basis.components.T @ coords
    return flat.reshape(basis.kernel_size, basis.kernel_size)


def reconstruction_error(samples: Sequence[BlurKernel], basis: PcaBasis) -> float:
    """Mean L2 distance between kernels and their PCA reconstructions"""
    errors = [
        float(np.linalg.norm(pca_expand(pca_reduce(k, basis), basis) - k.data))
        for k in samples
    ]
    return float(np.mean(errors))


def sample_population(spec: KernelFamilySpec, count: int, seed: int) -> List[BlurKernel]:
    """Draw `count` kernels from a family with a dedicated seeded generator"""
    rng = np.random.default_rng(seed)
    return [sample_kernel(spec, rng)[0] for _ in range(count)]


def fit_family_basis(spec: KernelFamilySpec, d: int, count: int, seed: int) -> PcaBasis:
    """Fit the PCA basis of a family over freshly sampled kernels"""
    return pca_fit(sample_population(spec, count, seed), d)
