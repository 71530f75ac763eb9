"""Exception types shared by every DAN module.

Each error carries a short ``code`` so the CLI and the API can report
failures on a single machine-parsable line.
"""

import math
from typing import Any, Dict, Optional


class DanError(Exception):
    """Base class for all expected toolkit failures"""

    code = "E_DAN"

    def one_line(self) -> str:
        message = " ".join(str(self).split())
        return f"dan-error[{self.code}]: {message}"


class SizingError(DanError, ValueError):
    """Image, kernel or tensor sizes are incompatible"""

    code = "E_SIZE"


class KernelError(DanError, ValueError):
    """A blur kernel or kernel-family parameter is invalid"""

    code = "E_KERNEL"


class ConfigError(DanError, ValueError):
    """Configuration file, override or environment problem"""

    code = "E_CONFIG"


class CheckpointError(DanError):
    """Checkpoint cannot be read or does not match the requested configuration"""

    code = "E_CHECKPOINT"


class DatasetError(DanError):
    """Dataset files are missing or unreadable"""

    code = "E_DATA"

    def __init__(self, message: str, path: Optional[str] = None):
        if path is not None:
            message = f"{message} (file: {path})"
        super().__init__(message)
        self.path = path


class NonFiniteLossError(DanError):
    """Training produced NaN or Inf; carries the diagnostics needed to investigate"""

    code = "E_NONFINITE"

    def __init__(self, step: int, lr: float, grad_norms: Dict[str, float], dump_path: Optional[str] = None):
        # non-finite norms first, then the largest
        worst = sorted(grad_norms.items(), key=lambda kv: (math.isfinite(kv[1]), -kv[1] if math.isfinite(kv[1]) else 0.0))[:3]
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3e}, largest grad norms={worst}, state dump={dump_path})"
        )
        self.step = step
        self.lr = lr
        self.grad_norms = grad_norms
        self.dump_path = dump_path

    def diagnostics(self) -> Dict[str, Any]:
        return {"step": self.step, "lr": self.lr, "grad_norms": self.grad_norms, "dump_path": self.dump_path}
