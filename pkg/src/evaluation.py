"""
Metrics and measurement harnesses: PSNR/SSIM on the Y channel, kernel
errors, blind and non-blind evaluation, iteration sweeps and complexity.
"""

import csv
import json
import logging
import math
import os
import time
from collections import defaultdict
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
from pydantic import BaseModel
from skimage.color import rgb2ycbcr
from skimage.metrics import mean_squared_error, structural_similarity
from torch import nn
from tqdm import tqdm

from config.config import Config
from src.data import EvalSet
from src.errors import DatasetError, SizingError
from src.imaging import ImagePlane
from src.kernels import BlurKernel, PcaBasis, dirac_kernel, pca_reduce
from src.network import DAN

logger = logging.getLogger(__name__)

KernelLike = Union[BlurKernel, np.ndarray]


def rgb_to_y(image: ImagePlane) -> np.ndarray:
    """BT.601 video-range luminance in [0, 1] units"""
    if image.channels == 1:
        return image.data[:, :, 0]
    return rgb2ycbcr(image.data)[:, :, 0] / 255.0


def _y_pair(a: ImagePlane, b: ImagePlane, shave: int) -> Tuple[np.ndarray, np.ndarray]:
    if a.data.shape != b.data.shape:
        raise SizingError(f"images differ in shape: {a.data.shape} vs {b.data.shape}")
    if shave < 0:
        raise ValueError("shave must be >= 0")
    ya, yb = rgb_to_y(a), rgb_to_y(b)
    if shave:
        ya, yb = ya[shave:-shave, shave:-shave], yb[shave:-shave, shave:-shave]
    if ya.size == 0:
        raise SizingError(f"nothing left after shaving {shave} pixels from {a.height}×{a.width}")
    return ya, yb


def psnr_y(a: ImagePlane, b: ImagePlane, shave: int = 0) -> float:
    """10·log10(1/MSE) on Y; +inf for identical inputs"""
    ya, yb = _y_pair(a, b, shave)
    mse = mean_squared_error(ya, yb)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_y(a: ImagePlane, b: ImagePlane, shave: int = 0) -> float:
    """
    Single-scale SSIM on Y with an 11×11 Gaussian window (sigma 1.5)

    Args:
        a: first image
        b: second image, same shape
        shave: border removed before the computation

    Returns:
        mean SSIM over the valid window positions
    """
    ya, yb = _y_pair(a, b, shave)
    if min(ya.shape) < Config.SSIM_WINDOW:
        raise SizingError(f"SSIM needs at least {Config.SSIM_WINDOW}×{Config.SSIM_WINDOW} pixels, got {ya.shape}")
    return float(structural_similarity(
        ya, yb, data_range=1.0, gaussian_weights=True, sigma=Config.SSIM_SIGMA,
        use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


def cap_psnr(value: float) -> float:
    return min(value, Config.PSNR_CAP)


def report_header(shave: int, **extra: Any) -> Dict[str, Any]:
    """Conventions recorded in every report"""
    return {"shave": shave, "ycbcr": Config.YCBCR_VARIANT, "psnr_cap": Config.PSNR_CAP, **extra}


class MetricReport(BaseModel):
    names: List[str]
    psnr_y: List[float]
    ssim_y: List[float]
    header: Dict[str, Any] = {}

    @property
    def psnr_mean(self) -> float:
        return float(np.mean([cap_psnr(v) for v in self.psnr_y])) if self.psnr_y else math.nan

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_y)) if self.ssim_y else math.nan

    def summary(self) -> Dict[str, Any]:
        return {**self.header, "images": len(self.names),
                "psnr_y": round(self.psnr_mean, 4), "ssim_y": round(self.ssim_mean, 6)}


class KernelErrorReport(BaseModel):
    l1_complete: float
    l1_reduced: float
    group: Optional[str] = None


def kernel_error(k_pred: KernelLike, k_gt: KernelLike, basis: PcaBasis, group: Optional[str] = None) -> KernelErrorReport:
    """Mean absolute error in the complete space and in reduced coordinates"""
    pred = k_pred.data if isinstance(k_pred, BlurKernel) else np.asarray(k_pred, dtype=np.float64)
    gt = k_gt.data if isinstance(k_gt, BlurKernel) else np.asarray(k_gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise SizingError(f"kernel sizes differ: {pred.shape} vs {gt.shape}")
    reduced_pred = pca_reduce(pred, basis).coords
    reduced_gt = pca_reduce(gt, basis).coords
    return KernelErrorReport(
        l1_complete=float(np.mean(np.abs(pred - gt))),
        l1_reduced=float(np.mean(np.abs(reduced_pred - reduced_gt))),
        group=group,
    )


def group_kernel_errors(reports: Iterable[KernelErrorReport]) -> Dict[str, Dict[str, float]]:
    """Mean errors per group label ("all" when ungrouped)"""
    buckets: Dict[str, List[KernelErrorReport]] = defaultdict(list)
    for report in reports:
        buckets[report.group or "all"].append(report)
    return {
        name: {
            "l1_complete": float(np.mean([r.l1_complete for r in items])),
            "l1_reduced": float(np.mean([r.l1_reduced for r in items])),
            "count": len(items),
        }
        for name, items in buckets.items()
    }


def kernel_group_label(label: Dict[str, Any]) -> Optional[str]:
    if "sigma" in label:
        return f"sigma={label['sigma']:.2f}"
    return None


def plane_to_tensor(image: ImagePlane, device: str = "cpu") -> torch.Tensor:
    data = np.ascontiguousarray(image.data.transpose(2, 0, 1))
    return torch.as_tensor(data, dtype=torch.float32, device=device)[None]


def tensor_to_plane(tensor: torch.Tensor) -> ImagePlane:
    """1×C×H×W (or C×H×W) tensor to an image, clipped to [0, 1]"""
    data = tensor.detach().float().cpu().clamp(0.0, 1.0)
    if data.dim() == 4:
        data = data[0]
    return ImagePlane(data.permute(1, 2, 0).numpy().astype(np.float64))


def bicubic_upscale(lr: ImagePlane, scale: int) -> ImagePlane:
    """Baseline upscaling, clipped to [0, 1]"""
    if scale == 1:
        return lr
    data = cv2.resize(lr.data, (lr.width * scale, lr.height * scale), interpolation=cv2.INTER_CUBIC)
    if data.ndim == 2:
        data = data[:, :, None]
    return ImagePlane(np.clip(data, 0.0, 1.0))


def _record_name(eval_set: EvalSet, index: int) -> str:
    return os.path.splitext(os.path.basename(eval_set.records[index].lr))[0]


def _model_device(model: nn.Module) -> str:
    return str(next(model.parameters()).device)


@torch.no_grad()
def run_blind(model: DAN, lr: ImagePlane, iterations: Optional[int] = None):
    """Super-resolve one image; returns (SR image, complete kernel array, trace)"""
    model.eval()
    sr, kernel, trace = model(plane_to_tensor(lr, _model_device(model)), iterations=iterations)
    return tensor_to_plane(sr), kernel[0].double().cpu().numpy(), trace


class BlindEvaluation(BaseModel):
    metrics: MetricReport
    bicubic: MetricReport
    kernel_errors: List[KernelErrorReport] = []
    dirac_errors: List[KernelErrorReport] = []

    def kernel_groups(self) -> Dict[str, Dict[str, float]]:
        return group_kernel_errors(self.kernel_errors)

    def summary(self) -> Dict[str, Any]:
        result: Dict[str, Any] = {
            "dan": self.metrics.summary(),
            "bicubic": self.bicubic.summary(),
        }
        if self.kernel_errors:
            result["kernel_error"] = self.kernel_groups()
            result["dirac_kernel_error"] = group_kernel_errors(
                KernelErrorReport(l1_complete=r.l1_complete, l1_reduced=r.l1_reduced) for r in self.dirac_errors
            )["all"]
        return result


def evaluate_blind(
    model: DAN,
    eval_set: EvalSet,
    iterations: Optional[int] = None,
    shave: Optional[int] = None,
    basis: Optional[PcaBasis] = None,
) -> BlindEvaluation:
    """
    Blind evaluation with the bicubic and constant-Dirac baselines

    Args:
        model: trained DAN
        eval_set: synthesized evaluation set
        iterations: alternations T at inference (model default when omitted)
        shave: border removed before metrics (scale when omitted)
        basis: basis for reduced kernel errors (the model's projector basis when omitted)

    Returns:
        BlindEvaluation
    """
    eval_set.check_scale(model.scale)
    scale = model.scale
    shave = scale if shave is None else shave
    T = model.cfg.iterations if iterations is None else iterations
    basis = basis or model.projector.basis()
    header = report_header(shave, scale=scale, iterations=T)

    names, psnrs, ssims, bic_psnrs, bic_ssims = [], [], [], [], []
    kernel_reports: List[KernelErrorReport] = []
    dirac_reports: List[KernelErrorReport] = []
    dirac = dirac_kernel(basis.kernel_size)

    for index in tqdm(range(len(eval_set)), desc=f"evaluating T={T}"):
        lr, hr, gt_kernel = eval_set.load(index)
        sr, kernel, _ = run_blind(model, lr, T)
        names.append(_record_name(eval_set, index))
        psnrs.append(psnr_y(sr, hr, shave))
        ssims.append(ssim_y(sr, hr, shave))
        bicubic = bicubic_upscale(lr, scale)
        bic_psnrs.append(psnr_y(bicubic, hr, shave))
        bic_ssims.append(ssim_y(bicubic, hr, shave))
        if gt_kernel is not None and gt_kernel.size == basis.kernel_size:
            group = kernel_group_label(eval_set.records[index].label)
            kernel_reports.append(kernel_error(kernel, gt_kernel, basis, group))
            dirac_reports.append(kernel_error(dirac, gt_kernel, basis, group))

    result = BlindEvaluation(
        metrics=MetricReport(names=names, psnr_y=psnrs, ssim_y=ssims, header=header),
        bicubic=MetricReport(names=names, psnr_y=bic_psnrs, ssim_y=bic_ssims, header={**header, "method": "bicubic"}),
        kernel_errors=kernel_reports,
        dirac_errors=dirac_reports,
    )
    logger.info("blind eval: %s", result.metrics.summary())
    return result


class SweepRow(BaseModel):
    T: int
    psnr_y: float
    ssim_y: float


@torch.no_grad()
def iteration_sweep(
    model: DAN,
    eval_set: EvalSet,
    T_range: Sequence[int] = tuple(range(1, 8)),
    shave: Optional[int] = None,
) -> List[SweepRow]:
    """
    Mean PSNR/SSIM for every iteration count in T_range

    Iteration t of a longer run equals the final output of a run with T=t,
    so one forward pass with max(T_range) serves every row.
    """
    counts = sorted(set(T_range))
    if not counts or counts[0] < 1:
        raise ValueError("T_range must contain iteration counts >= 1")
    eval_set.check_scale(model.scale)
    shave = model.scale if shave is None else shave
    model.eval()
    psnrs: Dict[int, List[float]] = defaultdict(list)
    ssims: Dict[int, List[float]] = defaultdict(list)

    for index in tqdm(range(len(eval_set)), desc="iteration sweep"):
        lr, hr, _ = eval_set.load(index)
        _, _, trace = model(plane_to_tensor(lr, _model_device(model)), iterations=counts[-1])
        for T in counts:
            sr = tensor_to_plane(trace[T - 1].sr)
            psnrs[T].append(cap_psnr(psnr_y(sr, hr, shave)))
            ssims[T].append(ssim_y(sr, hr, shave))

    rows = [SweepRow(T=T, psnr_y=float(np.mean(psnrs[T])), ssim_y=float(np.mean(ssims[T]))) for T in counts]
    for row in rows:
        logger.info("T=%d psnr=%.4f ssim=%.6f", row.T, row.psnr_y, row.ssim_y)
    return rows


@torch.no_grad()
def non_blind_eval(model: DAN, eval_set: EvalSet, shave: Optional[int] = None) -> MetricReport:
    """Single Restorer pass conditioned on the reduced ground-truth kernel"""
    if not eval_set.has_kernels:
        raise DatasetError("non-blind evaluation needs ground-truth kernels", str(eval_set.root))
    eval_set.check_scale(model.scale)
    shave = model.scale if shave is None else shave
    size = model.projector.kernel_size
    device = _model_device(model)
    model.eval()
    names, psnrs, ssims = [], [], []

    for index in tqdm(range(len(eval_set)), desc="non-blind"):
        lr, hr, gt_kernel = eval_set.load(index)
        if gt_kernel.size != size:
            raise SizingError(f"ground-truth kernel is {gt_kernel.size}×{gt_kernel.size}, model uses {size}×{size}")
        kernel = torch.as_tensor(gt_kernel.data, dtype=torch.float32, device=device)[None]
        sr = tensor_to_plane(model.restore_with_kernel(plane_to_tensor(lr, device), kernel))
        names.append(_record_name(eval_set, index))
        psnrs.append(psnr_y(sr, hr, shave))
        ssims.append(ssim_y(sr, hr, shave))

    return MetricReport(names=names, psnr_y=psnrs, ssim_y=ssims,
                        header=report_header(shave, scale=model.scale, method="non-blind"))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@torch.no_grad()
def count_macs(model: nn.Module, run: Callable[[], Any]) -> int:
    """
    Multiply-accumulates of conv and dense layers during one call of `run`

    Counted per sample by forward hooks; pooling, activations and
    elementwise products are not included.
    """
    total = 0

    def hook(module: nn.Module, inputs, output: torch.Tensor):
        nonlocal total
        per_output = output[0].numel()
        if isinstance(module, nn.Conv2d):
            kh, kw = module.kernel_size
            total += per_output * (module.in_channels // module.groups) * kh * kw
        else:
            total += per_output * module.in_features

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    try:
        run()
    finally:
        for handle in handles:
            handle.remove()
    return total


class BenchmarkReport(BaseModel):
    params: int
    macs: int
    input_size: Tuple[int, int, int]
    iterations: int
    sec_per_image: Optional[float] = None
    images: int = 0
    device: str = "cpu"


@torch.no_grad()
def benchmark(
    model: DAN,
    eval_set: Optional[EvalSet] = None,
    input_size: Tuple[int, int, int] = (3, 64, 64),
    iterations: Optional[int] = None,
) -> BenchmarkReport:
    """
    Parameter count, MACs for one input of `input_size` and mean seconds per image

    Args:
        model: DAN, trained or freshly initialized
        eval_set: images to time; timing is skipped when omitted
        input_size: C×H×W of the LR input used for the MAC count
        iterations: alternations T (model default when omitted)

    Returns:
        BenchmarkReport
    """
    model.eval()
    device = _model_device(model)
    T = model.cfg.iterations if iterations is None else iterations
    dummy = torch.zeros((1, *input_size), device=device)
    macs = count_macs(model, lambda: model(dummy, iterations=T))

    seconds: List[float] = []
    if eval_set is not None:
        for index in tqdm(range(len(eval_set)), desc="benchmark"):
            lr, _, _ = eval_set.load(index)
            batch = plane_to_tensor(lr, device)
            if device.startswith("cuda"):
                torch.cuda.synchronize()
            started = time.perf_counter()
            model(batch, iterations=T)
            if device.startswith("cuda"):
                torch.cuda.synchronize()
            seconds.append(time.perf_counter() - started)

    return BenchmarkReport(
        params=count_parameters(model), macs=macs, input_size=tuple(input_size), iterations=T,
        sec_per_image=float(np.mean(seconds)) if seconds else None, images=len(seconds), device=device,
    )


def _write_comment_header(f, header: Dict[str, Any]):
    for key, value in header.items():
        f.write(f"# {key}={value}\n")


def write_metric_csv(report: MetricReport, path: str) -> None:
    """Per-image metrics; conventions go into leading comment lines"""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        _write_comment_header(f, report.header)
        writer = csv.writer(f)
        writer.writerow(["image", "psnr_y", "ssim_y"])
        for name, p, s in zip(report.names, report.psnr_y, report.ssim_y):
            writer.writerow([name, f"{p:.4f}", f"{s:.6f}"])


def write_sweep_csv(rows: Sequence[SweepRow], path: str, header: Optional[Dict[str, Any]] = None) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        _write_comment_header(f, header or {})
        writer = csv.writer(f)
        writer.writerow(["T", "psnr_y", "ssim_y"])
        for row in rows:
            writer.writerow([row.T, f"{row.psnr_y:.4f}", f"{row.ssim_y:.6f}"])


def write_kernel_error_csv(groups: Dict[str, Dict[str, float]], path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["group", "l1_complete", "l1_reduced", "count"])
        for name in sorted(groups):
            g = groups[name]
            writer.writerow([name, f"{g['l1_complete']:.8f}", f"{g['l1_reduced']:.8f}", g["count"]])


def read_csv_rows(path: str) -> List[Dict[str, str]]:
    """Rows of a report CSV, skipping comment lines"""
    with open(path, newline="") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def write_json(payload: Any, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
