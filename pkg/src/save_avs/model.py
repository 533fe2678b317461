"""Model assembly and the frozen/trainable parameter split."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .audio_adapter import ResidualAudioAdapter
from .backbone import ImageEncoder
from .config import ModelConfig
from .decoder import MaskDecoder


class SaveModel(nn.Module):
    """Audio stack -> adapter-augmented encoder -> prompt-conditioned decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.encoder = ImageEncoder(c.embed_dim, c.num_blocks, c.num_heads, c.patch_size,
                                    c.input_resolution, c.prompt_dim, c.mlp_ratio,
                                    c.adapter_hidden)
        self.audio = ResidualAudioAdapter(c.audio_dim, c.embed_dim, c.prompt_dim,
                                          c.num_blocks, c.prompt_mode)
        self.decoder = MaskDecoder(c.prompt_dim, num_heads=math.gcd(c.prompt_dim, c.num_heads),
                                   seed=c.seed)

    def forward(self, images: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        """Low-resolution mask logits ``[B, 1, 4H, 4W]``."""
        bundle = self.audio(audio)
        embedding = self.encoder(images, bundle.injections)
        return self.decoder(embedding, bundle.prompt)

    def predict_logits(self, images: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        """Mask logits ``[B, R, R]`` at the network input resolution."""
        low = self(images, audio)
        size = images.shape[-1]
        if low.shape[-1] != size:
            low = F.interpolate(low, size=(size, size), mode="bilinear", align_corners=False)
        return low[:, 0]


def build_model(config: ModelConfig) -> SaveModel:
    """Assemble a model with every parameter drawn from ``config.seed``.

    Construction runs under a forked global RNG seeded once, so module order
    fixes the draw order and two builds are bit-identical. Adapter output
    layers are then zeroed so the fresh model reproduces the frozen encoder.
    """
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = SaveModel(config)
    for block in model.encoder.blocks:
        block.adapter.zero_init_()
    model.audio.zero_init_()
    partition_parameters(model).apply(model)
    return model


TRAINABLE_PREFIXES = ("encoder.neck.", "audio.", "decoder.")


def _is_trainable(name: str) -> bool:
    return name.startswith(TRAINABLE_PREFIXES) or ".adapter." in name


@dataclass(frozen=True)
class ParameterPartition:
    frozen: frozenset
    trainable: frozenset

    def apply(self, model: nn.Module) -> None:
        for name, p in model.named_parameters():
            p.requires_grad_(name in self.trainable)

    def trainable_parameters(self, model: nn.Module) -> list:
        return [p for name, p in model.named_parameters() if name in self.trainable]


def partition_parameters(model: nn.Module) -> ParameterPartition:
    """Frozen: patch embedding and block attention/MLP/norm/rel-pos weights.

    Trainable: image adapters, the whole audio stack, the neck and the decoder.
    """
    names = [name for name, _ in model.named_parameters()]
    trainable = frozenset(n for n in names if _is_trainable(n))
    return ParameterPartition(frozenset(names) - trainable, trainable)
