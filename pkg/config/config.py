import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Iterable, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from src.errors import ConfigError

# Load environment variables from .env file
load_dotenv()

Ablation = Literal["dpcb", "crb", "no-softmax", "no-longskip"]


class Config:
    """Default values and environment for the DAN toolkit"""

    # Degradation model
    SCALE = 4
    SETTING = 1
    NOISE_SIGMA = 0.0
    PCA_DIM = 10
    PCA_SAMPLES = 10000

    # Network sizes
    RESTORER_GROUPS = 5
    RESTORER_BLOCKS = 10
    RESTORER_CHANNELS = 64
    ESTIMATOR_GROUPS = 1
    ESTIMATOR_BLOCKS = 5
    ESTIMATOR_CHANNELS = 32
    LEAKY_SLOPE = 0.2
    ITERATIONS = 4

    # Training protocol
    BATCH_SIZE = 64
    TOTAL_STEPS = 400_000
    LR0 = 4e-4
    HALVING_PERIOD = 200_000
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.99
    LAMBDA_KERNEL = 1.0
    CRB_GRAD_CLIP = 10.0
    LOG_INTERVAL = 100
    CHECKPOINT_INTERVAL = 5000
    NUM_WORKERS = 4

    # Data
    HR_TILE = 256
    TILE_STRIDE = 192
    LR_PATCH = 64

    # Evaluation
    PSNR_CAP = 100.0
    SSIM_WINDOW = 11
    SSIM_SIGMA = 1.5
    YCBCR_VARIANT = "bt601-video-range"

    EFFECTIVE_CONFIG_NAME = "effective-config.toml"

    @classmethod
    def cache_dir(cls) -> Path:
        """Directory for fitted PCA bases (DAN_CACHE)"""
        return Path(os.getenv("DAN_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "dan")))

    @classmethod
    def checkpoint_path(cls) -> Optional[str]:
        """Checkpoint served by the API (DAN_CHECKPOINT)"""
        return os.getenv("DAN_CHECKPOINT") or None

    @classmethod
    def device(cls) -> str:
        """Torch device from DAN_DEVICE, CUDA when available otherwise"""
        requested = os.getenv("DAN_DEVICE")
        if requested:
            return requested
        import torch

        return "cuda" if torch.cuda.is_available() else "cpu"

    @classmethod
    def validate(cls):
        """Validate that the environment is usable"""
        requested = os.getenv("DAN_DEVICE")
        if requested and not (requested == "cpu" or requested.startswith("cuda")):
            raise ConfigError(f"DAN_DEVICE must be 'cpu' or 'cuda[:N]', got {requested!r}")
        cache = cls.cache_dir()
        if cache.exists() and not cache.is_dir():
            raise ConfigError(f"DAN_CACHE points to a file, not a directory: {cache}")
        return True


class RunConfig(BaseModel):
    """Flat run configuration; every key can come from a TOML file or a key=value override"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = 0

    # degradation
    setting: Literal[1, 2] = Config.SETTING
    scale: Literal[1, 2, 3, 4] = Config.SCALE
    kernel_size: Optional[int] = None
    width_min: Optional[float] = None
    width_max: Optional[float] = None
    axis_min: Optional[float] = None
    axis_max: Optional[float] = None
    mult_noise_max: Optional[float] = None
    noise_sigma: float = Config.NOISE_SIGMA
    pca_dim: int = Config.PCA_DIM
    pca_samples: int = Config.PCA_SAMPLES

    # architecture
    restorer_groups: int = Config.RESTORER_GROUPS
    restorer_blocks: int = Config.RESTORER_BLOCKS
    restorer_channels: int = Config.RESTORER_CHANNELS
    estimator_groups: int = Config.ESTIMATOR_GROUPS
    estimator_blocks: int = Config.ESTIMATOR_BLOCKS
    estimator_channels: int = Config.ESTIMATOR_CHANNELS
    leaky_slope: float = Config.LEAKY_SLOPE
    ablation: Ablation = "dpcb"
    # Restorer length of the crb ablation as one plain stack; None keeps restorer_groups × restorer_blocks
    crb_blocks: Optional[int] = None
    iterations: int = Config.ITERATIONS

    # training
    batch_size: int = Config.BATCH_SIZE
    total_steps: int = Config.TOTAL_STEPS
    lr0: float = Config.LR0
    halving_period: int = Config.HALVING_PERIOD
    adam_beta1: float = Config.ADAM_BETA1
    adam_beta2: float = Config.ADAM_BETA2
    lambda_kernel: float = Config.LAMBDA_KERNEL
    grad_clip: Optional[float] = None
    log_interval: int = Config.LOG_INTERVAL
    checkpoint_interval: int = Config.CHECKPOINT_INTERVAL
    num_workers: int = Config.NUM_WORKERS

    # data
    hr_tile: int = Config.HR_TILE
    tile_stride: int = Config.TILE_STRIDE
    lr_patch: int = Config.LR_PATCH
    flip: bool = False

    # evaluation
    shave: Optional[int] = None

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and (value < 1 or value % 2 == 0):
            raise ValueError("kernel_size must be a positive odd integer")
        return value

    @field_validator("crb_blocks")
    @classmethod
    def _positive_or_unset(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator(
        "pca_dim", "pca_samples", "restorer_groups", "restorer_blocks", "restorer_channels",
        "estimator_groups", "estimator_blocks", "estimator_channels", "iterations",
        "batch_size", "total_steps", "halving_period", "log_interval", "checkpoint_interval",
        "hr_tile", "tile_stride", "lr_patch",
    )
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.halving_period > self.total_steps:
            raise ValueError("halving_period must not exceed total_steps")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.lr_patch * self.scale > self.hr_tile:
            raise ValueError("lr_patch * scale must fit inside hr_tile")
        return self

    @property
    def effective_shave(self) -> int:
        return self.scale if self.shave is None else self.shave

    @property
    def effective_grad_clip(self) -> float:
        """Global-norm clip; 0 disables. Defaults on only for the CRB ablation"""
        if self.grad_clip is not None:
            return self.grad_clip
        return Config.CRB_GRAD_CLIP if self.ablation == "crb" else 0.0

    def to_toml(self) -> str:
        lines = ["# effective DAN run configuration"]
        for key, value in self.model_dump().items():
            if value is None:
                continue
            lines.append(f"{key} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"


def parse_override(item: str) -> Dict[str, Any]:
    """
    Parse a single key=value override

    Args:
        item: text such as "scale=2" or "ablation=crb"

    Returns:
        One-entry dictionary with the typed value
    """
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        # bare words such as crb or no-softmax
        value = raw
    return {key: value}


def load_run_config(
    path: Optional[str] = None,
    overrides: Iterable[str] = (),
    base: Optional[RunConfig] = None,
    **explicit: Any,
) -> RunConfig:
    """
    Build the run configuration from a file, key=value overrides and explicit values

    Args:
        path: optional flat TOML file
        overrides: iterable of key=value strings, applied after the file
        base: configuration the file and overrides are layered on (defaults when omitted)
        explicit: values from dedicated CLI flags, applied last (None values ignored)

    Returns:
        Validated RunConfig
    """
    values: Dict[str, Any] = base.model_dump() if base is not None else {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                loaded = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"config file {path} is not valid TOML: {e}")
        nested = [key for key, value in loaded.items() if isinstance(value, dict)]
        if nested:
            raise ConfigError(f"config file {path} must be flat, found tables {nested}")
        values.update(loaded)

    for item in overrides:
        values.update(parse_override(item))
    values.update({key: value for key, value in explicit.items() if value is not None})

    try:
        return RunConfig(**values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}")


def write_effective_config(run: RunConfig, out_dir: str) -> Path:
    """Write the configuration that reproduces this run into out_dir"""
    os.makedirs(out_dir, exist_ok=True)
    path = Path(out_dir) / Config.EFFECTIVE_CONFIG_NAME
    path.write_text(run.to_toml())
    return path
