"""
Restorer, Estimator and the unfolded alternating network (DAN).

Starting from a Dirac kernel, DAN alternates

    x_t = Restorer(y, reduce(k_{t-1}))
    k_t = Estimator(y, x_t)

for T iterations with the same parameters at every iteration.
"""

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn

from config.config import Config, RunConfig
from src.blocks import BlockConfig, BlockKind, conv, initialize_weights, make_group
from src.errors import SizingError
from src.kernels import PcaBasis, dirac_kernel

logger = logging.getLogger(__name__)

# ablation flag -> (block kind, long skips, Softmax kernel head)
# crb reuses the DPCB layout unless RunConfig.crb_blocks sets its own length
ABLATIONS = {
    "crb": ("crb", False, False),
    "no-longskip": ("dpcb", False, False),
    "no-softmax": ("dpcb", True, False),
    "dpcb": ("dpcb", True, True),
}

# residual-branch convs start small so deep stacks begin close to identity
RESIDUAL_INIT_SCALE = 0.1


class RestorerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_groups: int = Config.RESTORER_GROUPS
    blocks_per_group: int = Config.RESTORER_BLOCKS
    channels: int = Config.RESTORER_CHANNELS
    scale: Literal[1, 2, 3, 4] = 4
    reduced_dim: int = Config.PCA_DIM
    in_channels: int = 3
    block: BlockKind = "dpcb"
    long_skip: bool = True
    negative_slope: float = Config.LEAKY_SLOPE

    @model_validator(mode="after")
    def _check(self) -> "RestorerConfig":
        if min(self.n_groups, self.blocks_per_group, self.channels, self.reduced_dim, self.in_channels) < 1:
            raise ValueError("restorer counts must be positive")
        return self


class EstimatorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_groups: int = Config.ESTIMATOR_GROUPS
    blocks_per_group: int = Config.ESTIMATOR_BLOCKS
    channels: int = Config.ESTIMATOR_CHANNELS
    kernel_size: int = 21
    scale: Literal[1, 2, 3, 4] = 4
    reduced_dim: int = Config.PCA_DIM
    in_channels: int = 3
    block: BlockKind = "dpcb"
    long_skip: bool = True
    softmax: bool = True
    # global average pooling followed by one dense layer
    head: Literal["gap-dense"] = "gap-dense"
    negative_slope: float = Config.LEAKY_SLOPE

    @model_validator(mode="after")
    def _check(self) -> "EstimatorConfig":
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if min(self.n_groups, self.blocks_per_group, self.channels, self.reduced_dim, self.in_channels) < 1:
            raise ValueError("estimator counts must be positive")
        return self


class DanConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    restorer: RestorerConfig
    estimator: EstimatorConfig
    iterations: int = Config.ITERATIONS

    @classmethod
    def from_run(cls, run: RunConfig, kernel_size: int) -> "DanConfig":
        block, long_skip, softmax = ABLATIONS[run.ablation]
        groups, blocks = run.restorer_groups, run.restorer_blocks
        if block == "crb" and run.crb_blocks is not None:
            groups, blocks = 1, run.crb_blocks
        restorer = RestorerConfig(
            n_groups=groups, blocks_per_group=blocks,
            channels=run.restorer_channels, scale=run.scale, reduced_dim=run.pca_dim,
            block=block, long_skip=long_skip, negative_slope=run.leaky_slope,
        )
        estimator = EstimatorConfig(
            n_groups=run.estimator_groups, blocks_per_group=run.estimator_blocks,
            channels=run.estimator_channels, kernel_size=kernel_size, scale=run.scale,
            reduced_dim=run.pca_dim, block=block, long_skip=long_skip, softmax=softmax,
            negative_slope=run.leaky_slope,
        )
        return cls(restorer=restorer, estimator=estimator, iterations=run.iterations)


class KernelProjector(nn.Module):
    """PCA reduce / expand on batched kernel tensors; the basis lives in buffers"""

    def __init__(self, basis: PcaBasis):
        super().__init__()
        self.kernel_size = basis.kernel_size
        self.register_buffer("mean", torch.as_tensor(basis.mean, dtype=torch.float32))
        self.register_buffer("components", torch.as_tensor(basis.components, dtype=torch.float32))

    @property
    def d(self) -> int:
        return self.components.shape[0]

    def basis(self) -> PcaBasis:
        return PcaBasis(
            mean=self.mean.detach().double().cpu().numpy(),
            components=self.components.detach().double().cpu().numpy(),
        )

    def reduce(self, kernel: torch.Tensor) -> torch.Tensor:
        flat = kernel.reshape(kernel.shape[0], -1)
        if flat.shape[1] != self.mean.shape[0]:
            raise SizingError(f"kernel has {flat.shape[1]} entries, basis expects {self.mean.shape[0]}")
        return (flat - self.mean) @ self.components.t()

    def expand(self, reduced: torch.Tensor) -> torch.Tensor:
        if reduced.shape[1] != self.d:
            raise SizingError(f"reduced kernel has {reduced.shape[1]} coordinates, basis has {self.d}")
        flat = self.mean + reduced @ self.components
        return flat.view(-1, self.kernel_size, self.kernel_size)


def _upsampler(scale: int, channels: int) -> nn.Module:
    """Sub-pixel upscaling: one ×3 stage for scale 3, ×2 stages for powers of two"""
    if scale == 1:
        return nn.Identity()
    if scale == 3:
        return nn.Sequential(conv(channels, 9 * channels, 3), nn.PixelShuffle(3))
    if scale in (2, 4):
        stages = []
        for _ in range(scale // 2):
            stages += [conv(channels, 4 * channels, 3), nn.PixelShuffle(2)]
        return nn.Sequential(*stages)
    raise SizingError(f"unsupported scale {scale}")


def _init_body(module: nn.Module, body: nn.ModuleList, negative_slope: float):
    initialize_weights(module, negative_slope=negative_slope)
    for group in body:
        for block in group.blocks:
            for m in block.modules():
                if isinstance(m, nn.Conv2d):
                    m.weight.data.mul_(RESIDUAL_INIT_SCALE)


class Restorer(nn.Module):
    """Maps (LR image, reduced kernel) to the SR image"""

    def __init__(self, cfg: RestorerConfig):
        super().__init__()
        self.cfg = cfg
        nf = cfg.channels
        # the reduced kernel stays 1×1 on the conditional path, hence k_c = 1
        block_cfg = BlockConfig(c_basic=nf, c_cond=nf, k_b=3, k_c=1, negative_slope=cfg.negative_slope)
        self.head_basic = conv(cfg.in_channels, nf, 3)
        self.head_cond = nn.Linear(cfg.reduced_dim, nf)
        self.body = nn.ModuleList(
            [make_group(cfg.block, block_cfg, cfg.blocks_per_group, cfg.long_skip) for _ in range(cfg.n_groups)]
        )
        self.body_tail = conv(nf, nf, 3)
        self.upsampler = _upsampler(cfg.scale, nf)
        self.tail = conv(nf, cfg.in_channels, 3)
        _init_body(self, self.body, cfg.negative_slope)

    def forward(self, lr: torch.Tensor, reduced: torch.Tensor) -> torch.Tensor:
        if lr.dim() != 4 or lr.shape[1] != self.cfg.in_channels:
            raise SizingError(f"LR input must be N×{self.cfg.in_channels}×H×W, got {tuple(lr.shape)}")
        if reduced.dim() != 2 or reduced.shape != (lr.shape[0], self.cfg.reduced_dim):
            raise SizingError(f"reduced kernel must be {lr.shape[0]}×{self.cfg.reduced_dim}, got {tuple(reduced.shape)}")
        head = self.head_basic(lr)
        basic = head
        cond = self.head_cond(reduced)[:, :, None, None]
        for group in self.body:
            basic, cond = group(basic, cond)
        basic = head + self.body_tail(basic)
        return self.tail(self.upsampler(basic))


class Estimator(nn.Module):
    """Maps (LR image, SR image) to a complete kernel, or to reduced coordinates without Softmax"""

    def __init__(self, cfg: EstimatorConfig):
        super().__init__()
        self.cfg = cfg
        nf, s = cfg.channels, cfg.scale
        block_cfg = BlockConfig(c_basic=nf, c_cond=nf, k_b=3, k_c=3, negative_slope=cfg.negative_slope)
        self.head_lr = conv(cfg.in_channels, nf, 3)
        # stride-s conv brings the SR image back to LR resolution
        self.head_sr = nn.Conv2d(cfg.in_channels, nf, 4 * s + 1, stride=s, padding=2 * s)
        self.body = nn.ModuleList(
            [make_group(cfg.block, block_cfg, cfg.blocks_per_group, cfg.long_skip) for _ in range(cfg.n_groups)]
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        out_dim = cfg.kernel_size ** 2 if cfg.softmax else cfg.reduced_dim
        self.head_out = nn.Linear(nf, out_dim)
        _init_body(self, self.body, cfg.negative_slope)

    @property
    def predicts_reduced(self) -> bool:
        return not self.cfg.softmax

    def forward(self, lr: torch.Tensor, sr: torch.Tensor) -> torch.Tensor:
        s = self.cfg.scale
        if sr.shape[0] != lr.shape[0] or tuple(sr.shape[-2:]) != (s * lr.shape[-2], s * lr.shape[-1]):
            raise SizingError(f"SR size {tuple(sr.shape[-2:])} must be {s}× the LR size {tuple(lr.shape[-2:])}")
        basic = self.head_lr(lr)
        cond = self.head_sr(sr)
        for group in self.body:
            basic, cond = group(basic, cond)
        out = self.head_out(self.pool(basic).flatten(1))
        if self.predicts_reduced:
            return out
        size = self.cfg.kernel_size
        return F.softmax(out, dim=1).view(-1, size, size)


@dataclass
class DanState:
    """One unrolled iteration: SR estimate, complete kernel, reduced kernel"""

    sr: torch.Tensor
    kernel: torch.Tensor
    reduced: torch.Tensor
    t: int


class DAN(nn.Module):
    """Deep alternating network with parameters shared across iterations"""

    def __init__(self, cfg: DanConfig, basis: PcaBasis):
        super().__init__()
        if basis.kernel_size != cfg.estimator.kernel_size:
            raise SizingError(
                f"basis is for {basis.kernel_size}×{basis.kernel_size} kernels, "
                f"estimator emits {cfg.estimator.kernel_size}×{cfg.estimator.kernel_size}"
            )
        if basis.d != cfg.restorer.reduced_dim:
            raise SizingError(f"basis has d={basis.d}, restorer expects d={cfg.restorer.reduced_dim}")
        self.cfg = cfg
        self.restorer = Restorer(cfg.restorer)
        self.estimator = Estimator(cfg.estimator)
        self.projector = KernelProjector(basis)
        dirac = torch.as_tensor(dirac_kernel(basis.kernel_size).data, dtype=torch.float32)
        self.register_buffer("dirac", dirac)
        self.register_buffer("dirac_reduced", self.projector.reduce(dirac[None])[0])

    @property
    def scale(self) -> int:
        return self.cfg.restorer.scale

    def initial_state(self, batch: int) -> Tuple[torch.Tensor, torch.Tensor]:
        kernel = self.dirac.expand(batch, -1, -1)
        reduced = self.dirac_reduced.expand(batch, -1)
        return kernel, reduced

    def estimate(self, lr: torch.Tensor, sr: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Run the Estimator and return (complete kernel, reduced kernel)"""
        out = self.estimator(lr, sr)
        if self.estimator.predicts_reduced:
            return self.projector.expand(out), out
        return out, self.projector.reduce(out)

    def forward(
        self, lr: torch.Tensor, iterations: Optional[int] = None
    ) -> Tuple[torch.Tensor, torch.Tensor, List[DanState]]:
        """
        Unfolded alternating restoration and kernel estimation

        Args:
            lr: N×C×H×W low-resolution batch
            iterations: number of alternations T; the configured value when omitted

        Returns:
            tuple of (final SR batch, final kernels N×K×K, trace of every iteration)
        """
        T = self.cfg.iterations if iterations is None else iterations
        if T < 1:
            raise ValueError(f"iterations must be >= 1, got {T}")
        kernel, reduced = self.initial_state(lr.shape[0])
        trace: List[DanState] = []
        sr = None
        for t in range(1, T + 1):
            sr = self.restorer(lr, reduced)
            kernel, reduced = self.estimate(lr, sr)
            trace.append(DanState(sr=sr, kernel=kernel, reduced=reduced, t=t))
        return sr, kernel, trace

    def restore_with_kernel(self, lr: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
        """Single Restorer pass with a given (e.g. ground-truth) kernel"""
        return self.restorer(lr, self.projector.reduce(kernel))


def dan_forward(model: DAN, lr: torch.Tensor, T: int) -> Tuple[torch.Tensor, torch.Tensor, List[DanState]]:
    return model(lr, iterations=T)


def build_dan(run: RunConfig, basis: PcaBasis) -> DAN:
    """Construct DAN for a run configuration and its fitted basis; the caller's RNG state is kept"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(run.seed)
        model = DAN(DanConfig.from_run(run, basis.kernel_size), basis)
    logger.info(
        "built DAN x%d (%s): %d parameters", run.scale, run.ablation,
        sum(p.numel() for p in model.parameters()),
    )
    return model
