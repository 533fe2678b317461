"""Input checks shared by the modules, the estimator and the CLI."""

from __future__ import annotations

import numpy as np
import torch


class NonFiniteError(FloatingPointError):
    pass


class DataError(ValueError):
    """Malformed, missing or inconsistent data on disk or in memory."""


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {where}")
    return t


def check_binary_mask(gt, name: str = "gt") -> None:
    values = torch.as_tensor(gt)
    if not ((values == 0) | (values == 1)).all():
        raise DataError(f"{name} must be binary with values in {{0, 1}}")


def check_same_shape(a, b, what: str = "pred and gt") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch between {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def check_images(images, resolution: int) -> torch.Tensor:
    """Coerce to a float tensor ``[B, 3, R, R]`` and validate range and shape."""
    t = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[1] != 3 or t.shape[2] != resolution or t.shape[3] != resolution:
        raise ValueError(f"expected images of shape [B, 3, {resolution}, {resolution}], "
                         f"got {tuple(t.shape)}")
    t = t.float() if not t.is_floating_point() else t
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    return check_finite(t, "images")


def check_audio(audio, audio_dim: int, n: int | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(audio) if not torch.is_tensor(audio) else audio)
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.ndim != 2 or t.shape[1] != audio_dim:
        raise ValueError(f"expected audio features of shape [B, {audio_dim}], got {tuple(t.shape)}")
    if n is not None and t.shape[0] != n:
        raise ValueError(f"got {t.shape[0]} audio vectors for {n} images")
    t = t.float() if not t.is_floating_point() else t
    return check_finite(t, "audio features")
