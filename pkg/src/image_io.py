import logging
import os
from pathlib import Path
from typing import List, Tuple, Union

import cv2
import numpy as np

from src.errors import DatasetError
from src.imaging import ImagePlane
from src.kernels import BlurKernel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class PNGProcessor:
    """Reads and writes 8/16-bit PNG images and kernel heatmaps"""

    def __init__(self, bit_depth: int = 8, heatmap_zoom: int = 8):
        """
        Initialize PNG processor

        Args:
            bit_depth: bit depth used when writing images (8 or 16)
            heatmap_zoom: nearest-neighbour magnification of kernel heatmaps
        """
        if bit_depth not in (8, 16):
            raise ValueError(f"bit depth must be 8 or 16, got {bit_depth}")
        self.bit_depth = bit_depth
        self.heatmap_zoom = heatmap_zoom

    @staticmethod
    def _to_plane(data: np.ndarray, source: str) -> Tuple[ImagePlane, int]:
        if data.dtype == np.uint8:
            bits = 8
        elif data.dtype == np.uint16:
            bits = 16
        else:
            raise DatasetError(f"unsupported pixel type {data.dtype}", source)

        values = data.astype(np.float64) / (2 ** bits - 1)
        if values.ndim == 2:
            values = np.repeat(values[:, :, None], 3, axis=2)
        else:
            # BGR or BGRA -> RGB, alpha dropped
            values = values[:, :, [2, 1, 0]]
        return ImagePlane(np.ascontiguousarray(values)), bits

    def _to_codes(self, image: ImagePlane, bit_depth: int = None) -> np.ndarray:
        bits = bit_depth or self.bit_depth
        peak = 2 ** bits - 1
        codes = np.round(image.data * peak).astype(np.uint8 if bits == 8 else np.uint16)
        if image.channels == 3:
            return np.ascontiguousarray(codes[:, :, ::-1])
        return codes[:, :, 0]

    def read(self, path: PathLike) -> Tuple[ImagePlane, int]:
        """
        Read a PNG as an RGB image in [0, 1]

        Args:
            path: PNG file

        Returns:
            tuple of (image, source bit depth)
        """
        data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if data is None:
            raise DatasetError("cannot read image", str(path))
        return self._to_plane(data, str(path))

    def read_image(self, path: PathLike) -> ImagePlane:
        return self.read(path)[0]

    def decode(self, content: bytes, source: str = "<upload>") -> Tuple[ImagePlane, int]:
        """Decode PNG bytes (e.g. an upload) like read()"""
        data = cv2.imdecode(np.frombuffer(content, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
        if data is None:
            raise DatasetError("content is not a decodable image", source)
        return self._to_plane(data, source)

    def encode(self, image: ImagePlane, bit_depth: int = None) -> bytes:
        ok, buffer = cv2.imencode(".png", self._to_codes(image, bit_depth))
        if not ok:
            raise DatasetError("cannot encode image as PNG")
        return buffer.tobytes()

    def write(self, image: ImagePlane, path: PathLike, bit_depth: int = None) -> None:
        """Write an image as PNG, rounding to the processor's bit depth"""
        os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)
        if not cv2.imwrite(str(path), self._to_codes(image, bit_depth)):
            raise DatasetError("cannot write image", str(path))

    def write_heatmap(self, kernel: Union[BlurKernel, np.ndarray], path: PathLike) -> None:
        """Write a kernel as a min-max normalized grayscale PNG"""
        data = kernel.data if isinstance(kernel, BlurKernel) else np.asarray(kernel, dtype=np.float64)
        low, high = float(data.min()), float(data.max())
        scaled = (data - low) / (high - low) if high > low else np.zeros_like(data)
        codes = np.round(scaled * 255).astype(np.uint8)
        if self.heatmap_zoom > 1:
            codes = np.kron(codes, np.ones((self.heatmap_zoom, self.heatmap_zoom), dtype=np.uint8))
        os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)
        if not cv2.imwrite(str(path), codes):
            raise DatasetError("cannot write heatmap", str(path))

    @staticmethod
    def list_pngs(directory: PathLike) -> List[Path]:
        """Sorted PNG files of a directory"""
        root = Path(directory)
        if not root.is_dir():
            raise DatasetError("image directory does not exist", str(root))
        files = sorted(p for p in root.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DatasetError("no PNG images found", str(root))
        return files
