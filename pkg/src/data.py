"""
Training-pair synthesis and dataset handling.

Every random choice of a sample is drawn from a generator seeded by
(global seed, sample index), so the number of workers cannot change the
data a run sees.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from torch.utils.data import Dataset
from tqdm import tqdm

from config.config import Config, RunConfig
from src.errors import DatasetError, SizingError
from src.image_io import PNGProcessor
from src.imaging import ImagePlane, NoiseSpec, crop_to_multiple, degrade
from src.kernel_store import BasisCache, read_kernels, write_kernels
from src.kernels import (
    BlurKernel,
    KernelFamilySpec,
    PcaBasis,
    ReducedKernel,
    pca_reduce,
    sample_kernel,
    setting_family,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
KERNELS_NAME = "kernels.bkrn"


def derive_seed(*entropy: int) -> int:
    """Independent 31-bit seed from a tuple of integers"""
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0] & 0x7FFFFFFF)


class DegradationSpec(BaseModel):
    """Everything needed to synthesize LR images for one setting"""

    model_config = ConfigDict(frozen=True)

    scale: int
    family: KernelFamilySpec
    noise_sigma: float = 0.0
    pca_dim: int = Config.PCA_DIM
    pca_samples: int = Config.PCA_SAMPLES
    pca_seed: int = 0

    @property
    def kernel_size(self) -> int:
        return self.family.size

    @classmethod
    def from_run(cls, run: RunConfig) -> "DegradationSpec":
        family = setting_family(run.setting, run.scale)
        updates: Dict[str, Any] = {}
        if run.kernel_size is not None:
            updates["size"] = run.kernel_size
        if family.family == "isotropic" and (run.width_min is not None or run.width_max is not None):
            low, high = family.sigma_range
            updates["sigma_range"] = (run.width_min or low, run.width_max or high)
        if family.family == "anisotropic" and (run.axis_min is not None or run.axis_max is not None):
            low, high = family.axis_range
            updates["axis_range"] = (run.axis_min or low, run.axis_max or high)
        if run.mult_noise_max is not None:
            updates["mult_noise_max"] = run.mult_noise_max
        if updates:
            family = KernelFamilySpec(**{**family.model_dump(), **updates})
        return cls(
            scale=run.scale, family=family, noise_sigma=run.noise_sigma,
            pca_dim=run.pca_dim, pca_samples=run.pca_samples, pca_seed=run.seed,
        )

    def basis(self, cache: Optional[BasisCache] = None) -> PcaBasis:
        """PCA basis of this degradation's kernel family (cached on disk)"""
        cache = cache or BasisCache()
        return cache.load_or_fit(self.family, self.pca_dim, self.pca_samples, self.pca_seed)


@dataclass(eq=False)
class TrainSample:
    """Aligned LR/HR crops plus the kernel that produced them"""

    lr: ImagePlane
    hr: ImagePlane
    kernel: BlurKernel
    reduced: Optional[ReducedKernel]
    seed: int
    noise: NoiseSpec
    origin: Tuple[int, int]
    flipped: bool = False
    params: Dict[str, Any] = field(default_factory=dict)


def synth_pair(
    hr_patch: ImagePlane,
    spec: DegradationSpec,
    seed: int,
    lr_patch: int = Config.LR_PATCH,
    basis: Optional[PcaBasis] = None,
    flip: bool = False,
) -> TrainSample:
    """
    Synthesize one training pair on the fly

    The kernel is drawn from the family, the whole patch is degraded and
    aligned windows are cropped: lr[i, j] comes from hr[s·i, s·j].

    Args:
        hr_patch: HR patch of at least (lr_patch·s)×(lr_patch·s)
        spec: degradation setting
        seed: sample seed; the output is a pure function of it
        lr_patch: LR crop size
        basis: PCA basis used to attach the reduced kernel
        flip: allow a random horizontal flip

    Returns:
        TrainSample
    """
    s = spec.scale
    need = lr_patch * s
    if hr_patch.height < need or hr_patch.width < need:
        raise SizingError(f"HR patch {hr_patch.height}×{hr_patch.width} is smaller than {need}×{need}")

    rng = np.random.default_rng(seed)
    kernel, params = sample_kernel(spec.family, rng)
    noise = NoiseSpec(sigma=spec.noise_sigma, seed=int(rng.integers(0, 2 ** 31 - 1)))
    flipped = bool(flip and rng.random() < 0.5)

    hr = crop_to_multiple(hr_patch, s)
    if flipped:
        hr = hr.with_data(hr.data[:, ::-1])
    lr_full = degrade(hr, kernel, s, noise)

    top = int(rng.integers(0, lr_full.height - lr_patch + 1))
    left = int(rng.integers(0, lr_full.width - lr_patch + 1))
    lr = lr_full.with_data(lr_full.data[top:top + lr_patch, left:left + lr_patch])
    hr_crop = hr.with_data(hr.data[s * top:s * (top + lr_patch), s * left:s * (left + lr_patch)])

    reduced = pca_reduce(kernel, basis) if basis is not None else None
    return TrainSample(
        lr=lr, hr=hr_crop, kernel=kernel, reduced=reduced, seed=seed,
        noise=noise, origin=(top, left), flipped=flipped, params=params,
    )


def tile_positions(length: int, tile: int, stride: int) -> List[int]:
    return list(range(0, length - tile + 1, stride))


def write_training_tiles(
    hr_dir: str, out_dir: str, tile: int = Config.HR_TILE, stride: int = Config.TILE_STRIDE
) -> int:
    """
    Cut HR images into tile×tile patches with the given stride

    Args:
        hr_dir: directory of HR PNGs
        out_dir: destination of the tiles
        tile: tile size
        stride: step between tiles

    Returns:
        number of tiles written
    """
    io = PNGProcessor()
    count = 0
    for path in tqdm(io.list_pngs(hr_dir), desc="tiling"):
        image, bits = io.read(path)
        rows, cols = tile_positions(image.height, tile, stride), tile_positions(image.width, tile, stride)
        if not rows or not cols:
            logger.warning("skipping %s: smaller than one %dx%d tile", path.name, tile, tile)
            continue
        for top in rows:
            for left in cols:
                patch = image.with_data(image.data[top:top + tile, left:left + tile])
                io.write(patch, Path(out_dir) / f"{path.stem}_{top:05d}_{left:05d}.png", bit_depth=bits)
                count += 1
    logger.info("wrote %d training tiles to %s", count, out_dir)
    return count


class EvalRecord(BaseModel):
    """One manifest line: LR/HR paths relative to the set root plus the kernel index"""

    lr: str
    hr: str
    kernel_index: int
    label: Dict[str, Any] = {}
    noise_seed: int = 0
    scale: Optional[int] = None


def build_eval_set(
    hr_dir: str,
    spec: DegradationSpec,
    kernels: Sequence[BlurKernel],
    out_dir: str,
    seed: int = 0,
    labels: Optional[Sequence[Dict[str, Any]]] = None,
    per_image: bool = False,
) -> List[EvalRecord]:
    """
    Synthesize an evaluation set from HR images

    Args:
        hr_dir: directory of HR PNGs
        spec: degradation setting (scale and noise)
        kernels: kernels applied to every image, or one kernel per image when per_image
        out_dir: destination; receives hr/, lr/, kernels.bkrn and manifest.jsonl
        seed: seed for the noise of every record
        labels: optional metadata per kernel (e.g. the Gaussian width)
        per_image: pair kernel i with image i instead of applying all kernels

    Returns:
        manifest records, in the order written
    """
    io = PNGProcessor()
    hr_paths = io.list_pngs(hr_dir)
    if per_image and len(kernels) != len(hr_paths):
        raise DatasetError(f"{len(kernels)} kernels for {len(hr_paths)} images in per-image mode", hr_dir)
    root = Path(out_dir)
    records: List[EvalRecord] = []

    for image_index, path in enumerate(tqdm(hr_paths, desc="synthesizing")):
        image, bits = io.read(path)
        hr = crop_to_multiple(image, spec.scale)
        hr_rel = f"hr/{path.stem}.png"
        io.write(hr, root / hr_rel, bit_depth=bits)

        indices = [image_index] if per_image else range(len(kernels))
        for kernel_index in indices:
            noise = NoiseSpec(spec.noise_sigma, derive_seed(seed, len(records)))
            lr = degrade(hr, kernels[kernel_index], spec.scale, noise)
            lr_rel = f"lr/{path.stem}_k{kernel_index:02d}.png"
            io.write(lr, root / lr_rel, bit_depth=bits)
            label = dict(labels[kernel_index]) if labels is not None else {}
            records.append(EvalRecord(
                lr=lr_rel, hr=hr_rel, kernel_index=kernel_index, label=label,
                noise_seed=noise.seed, scale=spec.scale,
            ))

    write_kernels(list(kernels), str(root / KERNELS_NAME))
    with open(root / MANIFEST_NAME, "w") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")
    logger.info("eval set: %d LR images from %d HR images in %s", len(records), len(hr_paths), out_dir)
    return records


class EvalSet:
    """A synthesized evaluation set on disk"""

    def __init__(self, root: str):
        self.root = Path(root)
        manifest = self.root / MANIFEST_NAME
        if not manifest.exists():
            raise DatasetError("evaluation manifest not found", str(manifest))
        self.records = read_manifest(str(manifest))
        kernels_path = self.root / KERNELS_NAME
        self.kernels = read_kernels(str(kernels_path)) if kernels_path.exists() else None
        self.io = PNGProcessor()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def has_kernels(self) -> bool:
        return self.kernels is not None

    def check_scale(self, scale: int) -> None:
        """Reject a set synthesized for another scale factor"""
        recorded = {record.scale for record in self.records if record.scale is not None}
        if not recorded and self.records:
            # manifests without a recorded scale: infer it from the first pair
            lr, hr, _ = self.load(0)
            recorded = {hr.height // lr.height}
        if recorded and recorded != {scale}:
            raise DatasetError(
                f"evaluation set was synthesized at scale {', '.join(map(str, sorted(recorded)))}, the model upscales by {scale}",
                str(self.root),
            )

    def load(self, index: int) -> Tuple[ImagePlane, ImagePlane, Optional[BlurKernel]]:
        """Return (LR, HR, GT kernel or None) of one record"""
        record = self.records[index]
        lr = self.io.read_image(self.root / record.lr)
        hr = self.io.read_image(self.root / record.hr)
        kernel = self.kernels[record.kernel_index] if self.kernels is not None else None
        return lr, hr, kernel


def read_manifest(path: str) -> List[EvalRecord]:
    try:
        with open(path) as f:
            return [EvalRecord(**json.loads(line)) for line in f if line.strip()]
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot parse manifest: {e}", path)


class TrainPairDataset(Dataset):
    """Virtual dataset of on-the-fly pairs over pre-cut HR tiles"""

    def __init__(
        self,
        tile_dir: str,
        spec: DegradationSpec,
        basis: PcaBasis,
        seed: int,
        length: int,
        lr_patch: int = Config.LR_PATCH,
        flip: bool = False,
    ):
        self.tiles = PNGProcessor.list_pngs(tile_dir)
        self.spec = spec
        self.basis = basis
        self.seed = seed
        self.length = length
        self.lr_patch = lr_patch
        self.flip = flip
        self.io = PNGProcessor()

    def __len__(self) -> int:
        return self.length

    def sample(self, index: int) -> TrainSample:
        rng = np.random.default_rng([self.seed, index])
        tile = self.tiles[int(rng.integers(0, len(self.tiles)))]
        hr_patch = self.io.read_image(tile)
        return synth_pair(hr_patch, self.spec, int(rng.integers(0, 2 ** 31 - 1)),
                          self.lr_patch, self.basis, self.flip)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        return sample_to_tensors(self.sample(index))


def sample_to_tensors(sample: TrainSample) -> Dict[str, torch.Tensor]:
    def chw(plane: ImagePlane) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(plane.data.transpose(2, 0, 1))).float()

    out = {
        "lr": chw(sample.lr),
        "hr": chw(sample.hr),
        "kernel": torch.from_numpy(sample.kernel.data).float(),
    }
    if sample.reduced is not None:
        out["reduced"] = torch.from_numpy(sample.reduced.coords).float()
    return out


def collate_samples(samples: Sequence[TrainSample]) -> Dict[str, torch.Tensor]:
    """Stack TrainSamples into a batch dictionary"""
    tensors = [sample_to_tensors(s) for s in samples]
    return {key: torch.stack([t[key] for t in tensors]) for key in tensors[0]}
