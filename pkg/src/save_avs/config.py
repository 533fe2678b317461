"""Model and training configuration.

``ModelConfig`` is the single source of truth for model assembly. It is
serialized as a flat JSON object; unknown keys are rejected so that typos
fail loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

PROMPT_MODES = ("last", "sum")


class ConfigError(ValueError):
    """Raised for an invalid configuration value.

    The offending field name is kept on ``self.field``.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _positive_int(name, value):
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        raise ConfigError(name, f"must be a positive integer, got {value!r}")


@dataclass
class ModelConfig:
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    patch_size: int = 8
    input_resolution: int = 64
    prompt_dim: int = 64
    adapter_compression: float = 0.25
    audio_dim: int = 32
    mlp_ratio: float = 4.0
    prompt_mode: str = "last"
    fscore_beta_sq: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("embed_dim", "num_blocks", "num_heads", "patch_size",
                     "input_resolution", "prompt_dim", "audio_dim"):
            _positive_int(name, getattr(self, name))
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                "embed_dim",
                f"{self.embed_dim} is not divisible by num_heads={self.num_heads}")
        if self.input_resolution % self.patch_size:
            raise ConfigError(
                "input_resolution",
                f"{self.input_resolution} is not divisible by patch_size={self.patch_size}")
        r = self.adapter_compression
        if not isinstance(r, (int, float)) or not 0 < r <= 1:
            raise ConfigError("adapter_compression", f"must lie in (0, 1], got {r!r}")
        if math.floor(r * self.embed_dim) < 1:
            raise ConfigError(
                "adapter_compression",
                f"floor({r} * {self.embed_dim}) leaves an empty bottleneck")
        if not isinstance(self.mlp_ratio, (int, float)) or self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio", f"must be positive, got {self.mlp_ratio!r}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError("prompt_mode", f"must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")
        if not isinstance(self.fscore_beta_sq, (int, float)) or self.fscore_beta_sq < 0:
            raise ConfigError("fscore_beta_sq", f"must be nonnegative, got {self.fscore_beta_sq!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", f"must be an unsigned integer, got {self.seed!r}")

    @property
    def grid_side(self) -> int:
        return self.input_resolution // self.patch_size

    @property
    def adapter_hidden(self) -> int:
        return math.floor(self.adapter_compression * self.embed_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config key")
        return cls(**data)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"malformed JSON in {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 2e-4
    batch_size: int = 16
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 1
    checkpoint_dir: str | None = None
    clip_grad_norm: float | None = None
    betas: tuple = field(default=(0.9, 0.999))

    def __post_init__(self):
        _positive_int("epochs", self.epochs)
        _positive_int("batch_size", self.batch_size)
        _positive_int("eval_every", self.eval_every)
        if not self.base_lr > 0:
            raise ConfigError("base_lr", f"must be positive, got {self.base_lr!r}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be nonnegative, got {self.weight_decay!r}")
