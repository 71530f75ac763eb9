import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config.config import Config, RunConfig, write_effective_config
from src.data import DegradationSpec, EvalSet, build_eval_set, derive_seed, write_training_tiles
from src.errors import CheckpointError
from src.evaluation import (
    benchmark,
    evaluate_blind,
    iteration_sweep,
    non_blind_eval,
    plane_to_tensor,
    report_header,
    tensor_to_plane,
    write_json,
    write_kernel_error_csv,
    write_metric_csv,
    write_sweep_csv,
)
from src.image_io import PNGProcessor
from src.imaging import ImagePlane
from src.kernel_store import write_kernels
from src.kernels import BlurKernel, PcaBasis, gaussian8_sigmas, isotropic_gaussian, sample_kernel
from src.network import DAN
from src.training import check_compatible, load_checkpoint

logger = logging.getLogger(__name__)


def synthesize(run: RunConfig, hr_dir: str, out_dir: str, train: bool = False) -> Dict[str, Any]:
    """
    Build training tiles or an evaluation set from a directory of HR images

    Setting 1 applies the 8 Gaussian8 widths to every image; Setting 2 draws
    one anisotropic kernel per image from the run seed.
    """
    if train:
        count = write_training_tiles(hr_dir, out_dir, run.hr_tile, run.tile_stride)
        write_effective_config(run, out_dir)
        return {"tiles": count, "tile": run.hr_tile, "stride": run.tile_stride}

    spec = DegradationSpec.from_run(run)
    if run.setting == 1:
        sigmas = gaussian8_sigmas(max(run.scale, 2))
        kernels = [isotropic_gaussian(spec.kernel_size, float(sigma)) for sigma in sigmas]
        labels = [{"family": "isotropic", "sigma": float(sigma)} for sigma in sigmas]
        records = build_eval_set(hr_dir, spec, kernels, out_dir, seed=run.seed, labels=labels)
    else:
        count = len(PNGProcessor.list_pngs(hr_dir))
        drawn = [sample_kernel(spec.family, np.random.default_rng(derive_seed(run.seed, i))) for i in range(count)]
        kernels = [kernel for kernel, _ in drawn]
        labels = [params for _, params in drawn]
        records = build_eval_set(hr_dir, spec, kernels, out_dir, seed=run.seed, labels=labels, per_image=True)

    write_effective_config(run, out_dir)
    return {"lr_images": len(records), "kernels": len(kernels), "setting": run.setting, "scale": run.scale}


class DANPipeline:
    """Blind super-resolution pipeline around one trained DAN"""

    def __init__(self, model: DAN, run: RunConfig, basis: PcaBasis, device: Optional[str] = None):
        """
        Initialize the pipeline

        Args:
            model: DAN with loaded weights
            run: configuration the model was trained with
            basis: PCA basis of the model's kernel family
            device: torch device; Config.device() when omitted
        """
        print("Initializing DAN pipeline...")
        Config.validate()
        self.device = device or Config.device()
        self.model = model.to(self.device).eval()
        self.run = run
        self.basis = basis
        self.png = PNGProcessor()
        print("DAN pipeline initialized successfully!")

    @classmethod
    def from_checkpoint(
        cls,
        path: str,
        device: Optional[str] = None,
        configure: Optional[Callable[[RunConfig], RunConfig]] = None,
    ) -> "DANPipeline":
        """
        Load a trained pipeline

        Args:
            path: checkpoint written by the trainer
            device: torch device; Config.device() when omitted
            configure: maps the saved configuration to the requested one; the
                checkpoint is rejected when their architecture keys disagree

        Returns:
            DANPipeline running with the requested configuration
        """
        if not path or not os.path.exists(path):
            raise CheckpointError(f"checkpoint not found: {path}")
        checkpoint = load_checkpoint(path)
        run = checkpoint.run
        if configure is not None:
            run = configure(checkpoint.run)
            check_compatible(
                checkpoint.run, checkpoint.basis.kernel_size, run, DegradationSpec.from_run(run).kernel_size
            )
        return cls(checkpoint.model, run, checkpoint.basis, device)

    @property
    def scale(self) -> int:
        return self.model.scale

    def _iterations(self, iterations: Optional[int]) -> int:
        return self.run.iterations if iterations is None else iterations

    def _shave(self, shave: Optional[int]) -> Optional[int]:
        return self.run.shave if shave is None else shave

    @torch.no_grad()
    def super_resolve(self, lr: ImagePlane, iterations: Optional[int] = None) -> Tuple[ImagePlane, np.ndarray, np.ndarray]:
        """
        Super-resolve one LR image

        Args:
            lr: low-resolution image
            iterations: alternations T; the trained value when omitted

        Returns:
            tuple of (SR image, estimated kernel, its reduced coordinates)
        """
        sr, kernel, trace = self.model(plane_to_tensor(lr, self.device), iterations=self._iterations(iterations))
        return (
            tensor_to_plane(sr),
            kernel[0].double().cpu().numpy(),
            trace[-1].reduced[0].double().cpu().numpy(),
        )

    def estimate_kernel(self, lr: ImagePlane, iterations: Optional[int] = None) -> Dict[str, Any]:
        _, kernel, reduced = self.super_resolve(lr, iterations)
        return {
            "kernel_size": int(kernel.shape[0]),
            "kernel": kernel.tolist(),
            "reduced": reduced.tolist(),
            "iterations": self._iterations(iterations),
        }

    def infer_directory(
        self, lr_dir: str, out_dir: str, iterations: Optional[int] = None, save_kernels: bool = True
    ) -> Dict[str, Any]:
        """
        Super-resolve every PNG of a directory

        SR images go to out_dir/sr; kernel heatmaps and the kernel container to
        out_dir/kernels unless save_kernels is off. Kernel export never changes SR output.
        """
        paths = self.png.list_pngs(lr_dir)
        print(f"Super-resolving {len(paths)} images...")
        kernels: List[BlurKernel] = []
        for path in paths:
            lr, bits = self.png.read(path)
            sr, kernel, _ = self.super_resolve(lr, iterations)
            self.png.write(sr, Path(out_dir) / "sr" / path.name, bit_depth=bits)
            if save_kernels:
                self.png.write_heatmap(kernel, Path(out_dir) / "kernels" / f"{path.stem}_kernel.png")
                # reconstructed kernels of the no-Softmax ablations may dip below zero
                kernels.append(BlurKernel.normalized(np.clip(kernel, 0.0, None)))

        if save_kernels:
            write_kernels(kernels, str(Path(out_dir) / "kernels" / "kernels.bkrn"))
        print("Inference completed!")
        return {"images": len(paths), "iterations": self._iterations(iterations),
                "kernels_saved": save_kernels}

    def evaluate(self, eval_dir: str, out_dir: str, iterations: Optional[int] = None,
                 shave: Optional[int] = None) -> Dict[str, Any]:
        """Blind metrics, baselines and kernel errors written as CSV and JSON"""
        result = evaluate_blind(
            self.model, EvalSet(eval_dir), self._iterations(iterations), self._shave(shave), self.basis
        )
        write_metric_csv(result.metrics, os.path.join(out_dir, "metrics.csv"))
        write_metric_csv(result.bicubic, os.path.join(out_dir, "bicubic.csv"))
        if result.kernel_errors:
            write_kernel_error_csv(result.kernel_groups(), os.path.join(out_dir, "kernel-errors.csv"))
        summary = result.summary()
        write_json(summary, os.path.join(out_dir, "summary.json"))
        return summary

    def sweep(self, eval_dir: str, out_dir: str, T_range: Sequence[int] = tuple(range(1, 8)),
              shave: Optional[int] = None) -> Dict[str, Any]:
        shave = self._shave(shave)
        rows = iteration_sweep(self.model, EvalSet(eval_dir), T_range, shave)
        header = report_header(self.scale if shave is None else shave, scale=self.scale)
        write_sweep_csv(rows, os.path.join(out_dir, "sweep.csv"), header)
        summary = {**header, "rows": [row.model_dump() for row in rows]}
        write_json(summary, os.path.join(out_dir, "sweep.json"))
        return summary

    def non_blind(self, eval_dir: str, out_dir: str, shave: Optional[int] = None) -> Dict[str, Any]:
        report = non_blind_eval(self.model, EvalSet(eval_dir), self._shave(shave))
        write_metric_csv(report, os.path.join(out_dir, "non-blind.csv"))
        summary = report.summary()
        write_json(summary, os.path.join(out_dir, "non-blind.json"))
        return summary

    def bench(self, out_dir: str, eval_dir: Optional[str] = None,
              input_size: Tuple[int, int, int] = (3, 64, 64), iterations: Optional[int] = None) -> Dict[str, Any]:
        eval_set = EvalSet(eval_dir) if eval_dir else None
        report = benchmark(self.model, eval_set, input_size, self._iterations(iterations))
        summary = report.model_dump()
        write_json(summary, os.path.join(out_dir, "benchmark.json"))
        return summary
