"""
Binary containers for kernels and PCA bases, plus the on-disk basis cache.

Kernel container (little-endian):
    16-byte header: magic "BKRN", version u16, size u16, count u32, 4 reserved bytes
    count·size² float32 values, row-major

Basis container:
    16-byte header: magic "PCAB", version u16, size u16, d u32, 4 reserved bytes
    size² float32 mean, then d·size² float32 components
"""

import hashlib
import logging
import os
import struct
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from config.config import Config
from src.errors import DatasetError
from src.kernels import BlurKernel, KernelFamilySpec, PcaBasis, fit_family_basis

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<4sHHI4x")
KERNEL_MAGIC = b"BKRN"
BASIS_MAGIC = b"PCAB"
FORMAT_VERSION = 1


def _read_header(blob: bytes, magic: bytes, path: str):
    if len(blob) < HEADER.size:
        raise DatasetError("container is shorter than its header", path)
    found, version, size, count = HEADER.unpack_from(blob)
    if found != magic:
        raise DatasetError(f"bad magic {found!r}, expected {magic!r}", path)
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported container version {version}", path)
    return size, count


def write_kernels(kernels: Sequence[BlurKernel], path: str) -> None:
    """Write kernels of one common size to a BKRN container"""
    if not kernels:
        raise ValueError("cannot write an empty kernel container")
    size = kernels[0].size
    if any(k.size != size for k in kernels):
        raise ValueError("all kernels in a container must share one size")
    payload = np.stack([k.data for k in kernels]).astype("<f4")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(HEADER.pack(KERNEL_MAGIC, FORMAT_VERSION, size, len(kernels)))
        f.write(payload.tobytes())


def read_kernels(path: str) -> List[BlurKernel]:
    """Read every kernel of a BKRN container"""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read kernel container: {e}", path)
    size, count = _read_header(blob, KERNEL_MAGIC, path)
    expected = HEADER.size + 4 * count * size * size
    if len(blob) != expected:
        raise DatasetError(f"container holds {len(blob)} bytes, header implies {expected}", path)
    values = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).astype(np.float64)
    # float32 storage: renormalize so the sum-to-one invariant holds in float64
    return [BlurKernel.normalized(k) for k in values.reshape(count, size, size)]


def write_basis(basis: PcaBasis, path: str) -> None:
    """Write a PCA basis to a PCAB container"""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(HEADER.pack(BASIS_MAGIC, FORMAT_VERSION, basis.kernel_size, basis.d))
        f.write(basis.mean.astype("<f4").tobytes())
        f.write(basis.components.astype("<f4").tobytes())


def read_basis(path: str) -> PcaBasis:
    """Read a PCA basis from a PCAB container"""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read basis container: {e}", path)
    size, d = _read_header(blob, BASIS_MAGIC, path)
    n = size * size
    expected = HEADER.size + 4 * n * (d + 1)
    if len(blob) != expected:
        raise DatasetError(f"container holds {len(blob)} bytes, header implies {expected}", path)
    values = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).astype(np.float64)
    return PcaBasis(mean=values[:n], components=values[n:].reshape(d, n))


class BasisCache:
    """Fitted PCA bases keyed by kernel family, dimension, population size and seed"""

    def __init__(self, cache_dir: Optional[str] = None):
        """
        Initialize the cache

        Args:
            cache_dir: directory for PCAB files; DAN_CACHE when omitted
        """
        self.cache_dir = Path(cache_dir) if cache_dir is not None else Config.cache_dir()

    def path_for(self, spec: KernelFamilySpec, d: int, count: int, seed: int) -> Path:
        digest = hashlib.sha1(spec.model_dump_json().encode()).hexdigest()[:12]
        return self.cache_dir / f"pca_{spec.family}_k{spec.size}_{digest}_d{d}_n{count}_s{seed}.pcab"

    def load_or_fit(self, spec: KernelFamilySpec, d: int, count: int, seed: int) -> PcaBasis:
        """
        Return the cached basis for this family, fitting and storing it when missing

        Args:
            spec: kernel family the basis describes
            d: reduced dimension
            count: number of sampled kernels in the fitting population
            seed: seed of the fitting population

        Returns:
            PcaBasis as stored on disk (float32 precision)
        """
        path = self.path_for(spec, d, count, seed)
        if path.exists():
            logger.info("loading cached PCA basis %s", path)
            return read_basis(str(path))

        logger.info("fitting PCA basis: family=%s size=%d d=%d population=%d seed=%d",
                    spec.family, spec.size, d, count, seed)
        basis = fit_family_basis(spec, d, count, seed)
        try:
            write_basis(basis, str(path))
            logger.info("cached PCA basis at %s", path)
            return read_basis(str(path))
        except OSError as e:
            logger.warning("could not cache PCA basis at %s: %s", path, e)
            return basis

    def get_stats(self):
        """Get statistics about the cache"""
        entries = sorted(self.cache_dir.glob("*.pcab")) if self.cache_dir.exists() else []
        return {"cache_dir": str(self.cache_dir), "total_bases": len(entries)}
