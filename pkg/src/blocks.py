"""
Conditional building blocks shared by the Restorer and the Estimator.

DPCB  dual-path conditional block: the basic and conditional inputs are
      processed by separate conv paths and correlated by multiplication.
DPCG  a stack of DPCBs followed by a conv, wrapped by a long skip.
CRB   conditional residual block with channel attention, used by the crb ablation.
"""

import logging
from typing import Literal, Tuple

import torch
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn

from src.errors import SizingError

logger = logging.getLogger(__name__)

BlockKind = Literal["dpcb", "crb"]


class BlockConfig(BaseModel):
    """Channel counts, kernel sizes and strides of the two paths"""

    model_config = ConfigDict(frozen=True)

    c_basic: int
    c_cond: int
    k_b: int = 3
    k_c: int = 3
    s_b: int = 1
    s_c: int = 1
    negative_slope: float = 0.2

    @model_validator(mode="after")
    def _check(self) -> "BlockConfig":
        for name in ("c_basic", "c_cond", "k_b", "k_c", "s_b", "s_c"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.k_b % 2 == 0 or self.k_c % 2 == 0:
            raise ValueError("conv kernel sizes must be odd")
        if self.s_b != 1 or self.s_c != 1:
            raise ValueError("residual paths keep their spatial size, so strides must be 1")
        return self


def conv(in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2, bias=bias)


def initialize_weights(module: nn.Module, negative_slope: float = 0.2) -> None:
    """Kaiming fan-in init for conv and dense weights, zero biases"""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=negative_slope, mode="fan_in", nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _check_pair(basic: torch.Tensor, cond: torch.Tensor, c_basic: int, c_cond: int):
    if basic.dim() != 4 or cond.dim() != 4:
        raise SizingError(f"feature maps must be N×C×H×W, got {tuple(basic.shape)} and {tuple(cond.shape)}")
    if basic.shape[0] != cond.shape[0]:
        raise SizingError(f"batch sizes differ: {basic.shape[0]} vs {cond.shape[0]}")
    if basic.shape[1] != c_basic or cond.shape[1] != c_cond:
        raise SizingError(
            f"expected {c_basic} basic / {c_cond} conditional channels, "
            f"got {basic.shape[1]} / {cond.shape[1]}"
        )
    if cond.shape[2:] != basic.shape[2:] and tuple(cond.shape[2:]) != (1, 1):
        raise SizingError(
            f"conditional input must match the basic size {tuple(basic.shape[2:])} or be 1×1, "
            f"got {tuple(cond.shape[2:])}"
        )


class DPCB(nn.Module):
    """Dual-path conditional block"""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        if cfg.c_basic != cfg.c_cond:
            raise SizingError("DPCB multiplies the two paths, so c_basic must equal c_cond")
        self.cfg = cfg
        self.basic_path = nn.Sequential(
            conv(cfg.c_basic, cfg.c_basic, cfg.k_b),
            nn.LeakyReLU(cfg.negative_slope),
            conv(cfg.c_basic, cfg.c_basic, cfg.k_b),
        )
        # convolutions run at the conditional input's own spatial size
        self.cond_path = nn.Sequential(
            conv(cfg.c_cond, cfg.c_cond, cfg.k_c),
            nn.LeakyReLU(cfg.negative_slope),
            conv(cfg.c_cond, cfg.c_cond, cfg.k_c),
        )

    def forward(self, basic: torch.Tensor, cond: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        _check_pair(basic, cond, self.cfg.c_basic, self.cfg.c_cond)
        cond_feat = self.cond_path(cond)
        basic_feat = self.basic_path(basic)
        # a 1×1 conditional map broadcasts over H×W here
        return basic + basic_feat * cond_feat, cond + cond_feat


class DPCG(nn.Module):
    """Group of DPCBs with a long skip on the basic path (residual in residual)"""

    def __init__(self, cfg: BlockConfig, n_blocks: int, long_skip: bool = True):
        super().__init__()
        if n_blocks < 1:
            raise ValueError("a group needs at least one block")
        self.blocks = nn.ModuleList([DPCB(cfg) for _ in range(n_blocks)])
        self.long_skip = long_skip
        self.tail = conv(cfg.c_basic, cfg.c_basic, cfg.k_b) if long_skip else None

    def forward(self, basic: torch.Tensor, cond: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out, cond_out = basic, cond
        for block in self.blocks:
            out, cond_out = block(out, cond_out)
        if self.long_skip:
            out = basic + self.tail(out)
        return out, cond_out


class CALayer(nn.Module):
    """Channel attention: global pooling, bottleneck, sigmoid gate"""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.gate = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class CRB(nn.Module):
    """Conditional residual block: expand, concatenate, convolve, channel attention"""

    def __init__(self, cfg: BlockConfig, reduction: int = 16):
        super().__init__()
        self.cfg = cfg
        joint = cfg.c_basic + cfg.c_cond
        self.body = nn.Sequential(
            conv(joint, joint, cfg.k_b),
            nn.LeakyReLU(cfg.negative_slope),
            conv(joint, cfg.c_basic, cfg.k_b),
            CALayer(cfg.c_basic, reduction),
        )

    def forward(self, basic: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        _check_pair(basic, cond, self.cfg.c_basic, self.cfg.c_cond)
        if cond.shape[2:] != basic.shape[2:]:
            cond = cond.expand(-1, -1, basic.shape[2], basic.shape[3])
        return basic + self.body(torch.cat([basic, cond], dim=1))


class CRBGroup(nn.Module):
    """CRBs conditioned on one fixed input; same call signature as DPCG"""

    def __init__(self, cfg: BlockConfig, n_blocks: int, long_skip: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList([CRB(cfg) for _ in range(n_blocks)])
        self.long_skip = long_skip
        self.tail = conv(cfg.c_basic, cfg.c_basic, cfg.k_b) if long_skip else None

    def forward(self, basic: torch.Tensor, cond: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out = basic
        for block in self.blocks:
            out = block(out, cond)
        if self.long_skip:
            out = basic + self.tail(out)
        return out, cond


def make_group(kind: BlockKind, cfg: BlockConfig, n_blocks: int, long_skip: bool) -> nn.Module:
    if kind == "dpcb":
        return DPCG(cfg, n_blocks, long_skip)
    if kind == "crb":
        return CRBGroup(cfg, n_blocks, long_skip)
    raise ValueError(f"unknown block kind {kind!r}")
