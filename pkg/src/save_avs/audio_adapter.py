"""Residual audio encoder adapter stack.

One raw audio vector per frame is projected to the encoder width and passed
through a chain of residual MLP adapters (PEs). Stage ``i`` receives the
projected feature plus the previous stage's output::

    a_0 = 0
    a_i = PE_i(F_A + a_{i-1}),   PE(f) = MLP(f) + f

Each ``a_i`` is injected into encoder block ``i``; the last stage (or the sum
of all stages, with ``prompt_mode="sum"``) is mapped to the decoder width and
becomes the single sparse prompt token.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .config import PROMPT_MODES


class InjectionBundle(NamedTuple):
    injections: list  # N tensors of shape [B, C]
    prompt: torch.Tensor  # [B, 1, P]


class AudioPE(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(dim // 2, 1)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def zero_init_(self):
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)
        return self

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(f))) + f


class ResidualAudioAdapter(nn.Module):
    def __init__(self, audio_dim: int, dim: int, prompt_dim: int, num_blocks: int,
                 prompt_mode: str = "last"):
        super().__init__()
        if prompt_mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt_mode {prompt_mode!r}")
        self.prompt_mode = prompt_mode
        self.input_proj = nn.Linear(audio_dim, dim)
        self.pes = nn.ModuleList(AudioPE(dim) for _ in range(num_blocks))
        self.prompt_proj = nn.Sequential(
            nn.Linear(dim, prompt_dim), nn.GELU(), nn.Linear(prompt_dim, prompt_dim))

    def zero_init_(self):
        # Zero input projection: a fresh model ignores audio and matches the frozen encoder.
        nn.init.zeros_(self.input_proj.weight)
        nn.init.zeros_(self.input_proj.bias)
        for pe in self.pes:
            pe.zero_init_()
        return self

    def project_prompt(self, source: torch.Tensor) -> torch.Tensor:
        """Map a ``[B, C]`` source vector to a ``[B, 1, P]`` prompt token."""
        return self.prompt_proj(source).unsqueeze(1)

    def stages(self, f_a: torch.Tensor) -> list:
        out, prev = [], torch.zeros_like(f_a)
        for pe in self.pes:
            prev = pe(f_a + prev)
            out.append(prev)
        return out

    def prompt_source(self, injections: list) -> torch.Tensor:
        if self.prompt_mode == "last":
            return injections[-1]
        return sum(injections[1:], injections[0])

    def forward(self, f_raw: torch.Tensor) -> InjectionBundle:
        injections = self.stages(self.input_proj(f_raw))
        return InjectionBundle(injections, self.project_prompt(self.prompt_source(injections)))
