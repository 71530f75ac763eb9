"""
End-to-end training of DAN: loss, learning-rate schedule, optimizer step,
checkpoints and the JSON-lines training log.
"""

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator
from torch.utils.data import DataLoader
from tqdm import tqdm

from config.config import Config, RunConfig, write_effective_config
from src.data import DegradationSpec, TrainPairDataset
from src.errors import CheckpointError, NonFiniteLossError, SizingError
from src.kernel_store import write_basis
from src.kernels import PcaBasis
from src.network import DAN, build_dan

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# keys that change the parameter layout or the meaning of the conditional input
ARCHITECTURE_KEYS = (
    "setting", "scale", "kernel_size", "pca_dim", "ablation",
    "restorer_groups", "restorer_blocks", "restorer_channels",
    "estimator_groups", "estimator_blocks", "estimator_channels", "crb_blocks",
)
TRAIN_LOG_NAME = "train-log.jsonl"


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int = Config.BATCH_SIZE
    total_steps: int = Config.TOTAL_STEPS
    lr0: float = Config.LR0
    halving_period: int = Config.HALVING_PERIOD
    adam_beta1: float = Config.ADAM_BETA1
    adam_beta2: float = Config.ADAM_BETA2
    T: int = Config.ITERATIONS
    seed: int = 0
    lambda_kernel: float = Config.LAMBDA_KERNEL
    grad_clip: float = 0.0
    log_interval: int = Config.LOG_INTERVAL
    checkpoint_interval: int = Config.CHECKPOINT_INTERVAL
    num_workers: int = 0

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if min(self.batch_size, self.total_steps, self.halving_period, self.T) < 1 or self.lr0 <= 0:
            raise ValueError("training values must be positive")
        if self.halving_period > self.total_steps:
            raise ValueError("halving_period must not exceed total_steps")
        return self

    @classmethod
    def from_run(cls, run: RunConfig) -> "TrainConfig":
        return cls(
            batch_size=run.batch_size, total_steps=run.total_steps, lr0=run.lr0,
            halving_period=run.halving_period, adam_beta1=run.adam_beta1, adam_beta2=run.adam_beta2,
            T=run.iterations, seed=run.seed, lambda_kernel=run.lambda_kernel,
            grad_clip=run.effective_grad_clip, log_interval=run.log_interval,
            checkpoint_interval=run.checkpoint_interval, num_workers=run.num_workers,
        )


class LossReport(BaseModel):
    l1_image: float
    l1_kernel: float
    total: float
    step: int
    lambda_kernel: float


def dan_loss_terms(
    sr_T: torch.Tensor,
    hr: torch.Tensor,
    k_T: torch.Tensor,
    k_gt: torch.Tensor,
    lambda_kernel: float,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable (total, image term, kernel term); only final-iteration outputs enter"""
    if sr_T.shape != hr.shape:
        raise SizingError(f"SR {tuple(sr_T.shape)} and HR {tuple(hr.shape)} differ")
    if k_T.shape != k_gt.shape:
        raise SizingError(f"kernel shapes {tuple(k_T.shape)} and {tuple(k_gt.shape)} differ")
    l1_image = F.l1_loss(sr_T, hr)
    l1_kernel = F.l1_loss(k_T, k_gt)
    return l1_image + lambda_kernel * l1_kernel, l1_image, l1_kernel


def dan_loss(sr_T, hr, k_T, k_gt, lambda_kernel: float, step: int = 0) -> LossReport:
    """
    L1 on the final SR image plus lambda times L1 on the final kernel

    Args:
        sr_T: SR output of the last iteration
        hr: ground-truth HR image
        k_T: kernel of the last iteration (complete, or reduced for the no-Softmax ablations)
        k_gt: ground-truth kernel in the same space as k_T
        lambda_kernel: weight of the kernel term
        step: training step recorded in the report

    Returns:
        LossReport
    """
    total, l1_image, l1_kernel = dan_loss_terms(sr_T, hr, k_T, k_gt, lambda_kernel)
    return LossReport(
        l1_image=float(l1_image), l1_kernel=float(l1_kernel), total=float(total),
        step=step, lambda_kernel=lambda_kernel,
    )


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """lr0 halved every halving_period steps"""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    return cfg.lr0 * 0.5 ** (step // cfg.halving_period)


def make_optimizer(model: DAN, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(cfg.adam_beta1, cfg.adam_beta2))


def gradient_norms(model: DAN) -> Dict[str, float]:
    """L2 norm of the gradient per top-level submodule"""
    norms: Dict[str, float] = {}
    for name, module in model.named_children():
        grads = [p.grad.detach().flatten() for p in module.parameters() if p.grad is not None]
        if grads:
            norms[name] = float(torch.linalg.vector_norm(torch.cat(grads)))
    return norms


def train_step(
    model: DAN,
    batch: Dict[str, torch.Tensor],
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    step: int,
) -> LossReport:
    """
    One Adam update on the gradient through all T unrolled iterations

    Parameters and optimizer state are updated in place by their single owner.

    Args:
        model: DAN being trained
        batch: dictionary with lr, hr, kernel (and reduced for the no-Softmax ablations)
        cfg: training configuration
        optimizer: optimizer over the model parameters
        step: zero-based step index, used for the learning rate

    Returns:
        LossReport of this step (before the update)
    """
    model.train()
    lr_now = lr_schedule(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr_now

    device = next(model.parameters()).device
    lr_img = batch["lr"].to(device)
    hr = batch["hr"].to(device)

    sr, kernel, trace = model(lr_img, iterations=cfg.T)
    if model.estimator.predicts_reduced:
        k_pred, k_gt = trace[-1].reduced, batch["reduced"].to(device)
    else:
        k_pred, k_gt = kernel, batch["kernel"].to(device)
    total, l1_image, l1_kernel = dan_loss_terms(sr, hr, k_pred, k_gt, cfg.lambda_kernel)

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if not torch.isfinite(total):
        raise NonFiniteLossError(step, lr_now, gradient_norms(model))
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()

    return LossReport(
        l1_image=float(l1_image), l1_kernel=float(l1_kernel), total=float(total),
        step=step, lambda_kernel=cfg.lambda_kernel,
    )


@dataclass
class Checkpoint:
    model: DAN
    run: RunConfig
    step: int
    basis: PcaBasis
    optimizer_state: Optional[dict]


def save_checkpoint(
    path: str,
    model: DAN,
    run: RunConfig,
    step: int,
    basis: PcaBasis,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> None:
    """Write the checkpoint, its PCAB basis and a JSON sidecar manifest"""
    target = Path(path)
    os.makedirs(target.parent, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "run": run.model_dump(),
        "step": step,
        "seed": run.seed,
        "kernel_size": basis.kernel_size,
        "basis_mean": torch.as_tensor(basis.mean, dtype=torch.float64),
        "basis_components": torch.as_tensor(basis.components, dtype=torch.float64),
    }
    torch.save(payload, target)
    write_basis(basis, str(target.with_suffix(".pcab")))
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "seed": run.seed,
        "basis": target.with_suffix(".pcab").name,
        "kernel_size": basis.kernel_size,
        "parameters": sum(p.numel() for p in model.parameters()),
        "config": run.model_dump(),
    }
    target.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    logger.info("saved checkpoint %s at step %d", target, step)


def check_compatible(saved: RunConfig, saved_kernel_size: int, expected: RunConfig, expected_kernel_size: int):
    mismatches = [
        f"{key}: checkpoint={getattr(saved, key)!r} requested={getattr(expected, key)!r}"
        for key in ARCHITECTURE_KEYS
        if key != "kernel_size" and getattr(saved, key) != getattr(expected, key)
    ]
    if saved_kernel_size != expected_kernel_size:
        mismatches.append(f"kernel_size: checkpoint={saved_kernel_size} requested={expected_kernel_size}")
    if mismatches:
        raise CheckpointError("checkpoint does not match the configuration: " + "; ".join(mismatches))


def load_checkpoint(
    path: str,
    expected: Optional[RunConfig] = None,
    expected_kernel_size: Optional[int] = None,
    map_location: str = "cpu",
) -> Checkpoint:
    """
    Restore a model and its training state

    Args:
        path: checkpoint file written by save_checkpoint
        expected: configuration the caller intends to use; architecture keys must agree
        expected_kernel_size: kernel size the caller's degradation implies
        map_location: torch device for the tensors

    Returns:
        Checkpoint
    """
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")

    version = payload.get("version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version!r} is not supported (expected {CHECKPOINT_VERSION})")

    run = RunConfig(**payload["run"])
    basis = PcaBasis(
        mean=payload["basis_mean"].cpu().numpy(), components=payload["basis_components"].cpu().numpy()
    )
    if expected is not None:
        check_compatible(run, basis.kernel_size, expected, expected_kernel_size or basis.kernel_size)

    model = build_dan(run, basis)
    model.load_state_dict(payload["model"])
    model.to(map_location)
    return Checkpoint(model=model, run=run, step=int(payload["step"]), basis=basis,
                      optimizer_state=payload.get("optimizer"))


class Trainer:
    """Owns the model, the optimizer and the training loop"""

    def __init__(self, run: RunConfig, tile_dir: str, out_dir: str, resume: Optional[str] = None,
                 device: Optional[str] = None):
        """
        Initialize the trainer

        Args:
            run: run configuration
            tile_dir: directory of pre-cut HR tiles
            out_dir: destination of checkpoints, the training log and the effective config
            resume: optional checkpoint to continue from
            device: torch device; Config.device() when omitted
        """
        print("Initializing DAN trainer...")
        Config.validate()
        self.run = run
        self.cfg = TrainConfig.from_run(run)
        self.out_dir = Path(out_dir)
        self.device = device or Config.device()
        self.spec = DegradationSpec.from_run(run)

        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True

        self.step = 0
        if resume is not None:
            checkpoint = load_checkpoint(resume, expected=run, expected_kernel_size=self.spec.kernel_size)
            self.model, self.basis, self.step = checkpoint.model, checkpoint.basis, checkpoint.step
            self.model.to(self.device)
            self.optimizer = make_optimizer(self.model, self.cfg)
            if checkpoint.optimizer_state is not None:
                self.optimizer.load_state_dict(checkpoint.optimizer_state)
            print(f"Resuming from {resume} at step {self.step}")
        else:
            self.basis = self.spec.basis()
            self.model = build_dan(run, self.basis).to(self.device)
            self.optimizer = make_optimizer(self.model, self.cfg)

        self.dataset = TrainPairDataset(
            tile_dir, self.spec, self.basis, run.seed,
            length=self.cfg.total_steps * self.cfg.batch_size, lr_patch=run.lr_patch, flip=run.flip,
        )
        print("DAN trainer initialized successfully!")

    def current_lr(self) -> float:
        return lr_schedule(self.step, self.cfg)

    def checkpoint_path(self, name: str) -> Path:
        return self.out_dir / "checkpoints" / f"{name}.pt"

    def save(self, name: str) -> Path:
        path = self.checkpoint_path(name)
        save_checkpoint(str(path), self.model, self.run, self.step, self.basis, self.optimizer)
        return path

    def fit(self, max_steps: Optional[int] = None) -> List[LossReport]:
        """
        Train until total_steps (or max_steps more steps)

        Returns:
            the logged loss reports
        """
        write_effective_config(self.run, str(self.out_dir))
        end = self.cfg.total_steps if max_steps is None else min(self.cfg.total_steps, self.step + max_steps)
        start_index = self.step * self.cfg.batch_size
        loader = DataLoader(
            self.dataset,
            batch_size=self.cfg.batch_size,
            sampler=range(start_index, end * self.cfg.batch_size),
            num_workers=self.cfg.num_workers,
            prefetch_factor=2 if self.cfg.num_workers > 0 else None,
            drop_last=True,
        )
        log_path = self.out_dir / TRAIN_LOG_NAME
        reports: List[LossReport] = []
        started = time.time()
        print(f"Training steps {self.step}..{end} on {self.device}")

        with open(log_path, "a") as log, tqdm(total=end - self.step, desc="training") as progress:
            for batch in loader:
                try:
                    report = train_step(self.model, batch, self.cfg, self.optimizer, self.step)
                except NonFiniteLossError as e:
                    dump = self.save(f"nonfinite-step{self.step}")
                    logger.error("aborting at step %d, state dumped to %s", e.step, dump)
                    raise NonFiniteLossError(e.step, e.lr, e.grad_norms, str(dump)) from e
                self.step += 1
                progress.update(1)

                if self.step % self.cfg.log_interval == 0 or self.step == end:
                    reports.append(report)
                    record = {**report.model_dump(), "lr": lr_schedule(report.step, self.cfg),
                              "wall_clock": round(time.time() - started, 3)}
                    log.write(json.dumps(record) + "\n")
                    log.flush()
                    progress.set_postfix(loss=f"{report.total:.4f}")
                if self.step % self.cfg.checkpoint_interval == 0:
                    self.save(f"step{self.step:07d}")
                    self.save("latest")
                if self.step >= end:
                    break

        self.save("latest")
        print(f"Training finished at step {self.step}")
        return reports
