"""Input validation helpers and the package's exception types."""
from __future__ import annotations

import torch


class ConfigurationError(ValueError):
    """Raised for invalid configuration values or inconsistent settings."""


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class InvariantViolation(ValueError):
    """Raised when an input breaks a documented invariant (e.g. masks not summing to 1)."""


class WarmupSignal(RuntimeError):
    """Raised by an empty memory bank; callers skip the contrastive term for this step."""


class IntegrityError(RuntimeError):
    """Raised when a checkpoint payload fails its checksum or digest check."""


class VersionError(RuntimeError):
    """Raised when a checkpoint carries an unsupported format version."""


def check_image(x: torch.Tensor, name: str = "image", channels: int | None = 3,
                batched: bool = False) -> torch.Tensor:
    """Validate a channels-first image tensor (``C,H,W`` or ``N,C,H,W``)."""
    if not isinstance(x, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    ndim = 4 if batched else 3
    if x.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dims, got shape {tuple(x.shape)}")
    c = x.shape[-3]
    if channels is not None and c != channels:
        raise ShapeError(f"{name} must have {channels} channels, got {c}")
    return x


def check_divisible(x: torch.Tensor, factor: int = 4, name: str = "image") -> None:
    h, w = x.shape[-2:]
    if h % factor:
        raise ShapeError(f"{name} height {h} is not divisible by {factor}")
    if w % factor:
        raise ShapeError(f"{name} width {w} is not divisible by {factor}")


def check_probability(value: float, name: str) -> float:
    if not 0.0 <= value <= 1.0:
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
    return float(value)


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
