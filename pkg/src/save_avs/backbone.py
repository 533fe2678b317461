"""Frozen ViT-style image encoder with adapter-augmented blocks.

Attention is global with SAM-style decomposed relative position bias: one
learnable table per axis, indexed by the relative displacement between query
and key rows/columns. When the token grid changes size the tables are
resampled with :func:`interpolate_rel_pos`.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .image_adapter import ImageEncoderAdapter
from .validation import check_finite


def interpolate_rel_pos(table: torch.Tensor, target_side: int) -> torch.Tensor:
    """Resample a ``[2S-1, d]`` table to ``[2*target_side-1, d]``.

    Linear interpolation along the first axis with the endpoints pinned
    (align-corners), so the extreme displacements map onto each other.
    """
    if target_side < 1:
        raise ValueError(f"target_side must be >= 1, got {target_side}")
    length = 2 * target_side - 1
    if table.shape[0] == length:
        return table
    if table.shape[0] == 1:
        return table.expand(length, *table.shape[1:]).clone()
    resized = F.interpolate(table.t().unsqueeze(0), size=length, mode="linear",
                            align_corners=True)
    return resized[0].t()


def _rel_pos_lookup(table: torch.Tensor, side: int) -> torch.Tensor:
    table = interpolate_rel_pos(table, side)
    coords = torch.arange(side)
    rel = coords[:, None] - coords[None, :] + (side - 1)
    return table[rel]  # [side, side, head_dim]


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, grid_side: int):
        super().__init__()
        self.num_heads = num_heads
        head_dim = dim // num_heads
        self.scale = head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.rel_pos_h = nn.Parameter(0.02 * torch.randn(2 * grid_side - 1, head_dim))
        self.rel_pos_w = nn.Parameter(0.02 * torch.randn(2 * grid_side - 1, head_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        nh = self.num_heads
        qkv = self.qkv(x).reshape(B, H * W, 3, nh, C // nh).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.reshape(3, B * nh, H * W, C // nh).unbind(0)

        attn = (q * self.scale) @ k.transpose(-2, -1)
        rh = _rel_pos_lookup(self.rel_pos_h, H)
        rw = _rel_pos_lookup(self.rel_pos_w, W)
        r_q = q.reshape(B * nh, H, W, C // nh)
        rel_h = torch.einsum("bhwc,hkc->bhwk", r_q, rh)
        rel_w = torch.einsum("bhwc,wkc->bhwk", r_q, rw)
        attn = (attn.view(B * nh, H, W, H, W)
                + rel_h[:, :, :, :, None] + rel_w[:, :, :, None, :]).view(B * nh, H * W, H * W)
        attn = attn.softmax(dim=-1)

        out = (attn @ v).view(B, nh, H, W, C // nh).permute(0, 2, 3, 1, 4).reshape(B, H, W, C)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block with a parallel adapter on the MLP branch."""

    def __init__(self, dim: int, num_heads: int, grid_side: int, mlp_ratio: float,
                 adapter_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, grid_side)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.adapter = ImageEncoderAdapter(dim, adapter_hidden)
        # ViT-style init for the frozen stand-in weights; keeps each residual branch small.
        for lin in (self.attn.qkv, self.attn.proj, self.mlp[0], self.mlp[2]):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor, inject: torch.Tensor | None = None) -> torch.Tensor:
        if inject is not None:
            x = x + inject[:, None, None, :]
        x = self.attn(self.norm1(x)) + x
        y = self.norm2(x)
        out = self.mlp(y) + self.adapter(y) + x
        return check_finite(out, "encoder block")

    def vanilla_forward(self, x: torch.Tensor) -> torch.Tensor:
        """The same block with no adapter and no audio injection."""
        x = self.attn(self.norm1(x)) + x
        return self.mlp(self.norm2(x)) + x


class ImageEncoder(nn.Module):
    def __init__(self, embed_dim: int, num_blocks: int, num_heads: int, patch_size: int,
                 input_resolution: int, prompt_dim: int, mlp_ratio: float, adapter_hidden: int):
        super().__init__()
        self.patch_size = patch_size
        self.input_resolution = input_resolution
        side = input_resolution // patch_size
        self.patch_embed = nn.Conv2d(3, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.blocks = nn.ModuleList(
            Block(embed_dim, num_heads, side, mlp_ratio, adapter_hidden)
            for _ in range(num_blocks))
        self.neck = nn.Sequential(
            nn.Conv2d(embed_dim, prompt_dim, kernel_size=1, bias=False),
            LayerNorm2d(prompt_dim))

    @property
    def grid_side(self) -> int:
        return self.input_resolution // self.patch_size

    def set_input_resolution(self, resolution: int) -> None:
        """Resample every relative-position table for a new input resolution."""
        if resolution % self.patch_size:
            raise ValueError(f"resolution {resolution} not divisible by patch size {self.patch_size}")
        side = resolution // self.patch_size
        with torch.no_grad():
            for block in self.blocks:
                for name in ("rel_pos_h", "rel_pos_w"):
                    p = getattr(block.attn, name)
                    p.data = interpolate_rel_pos(p.data, side).contiguous()
        self.input_resolution = resolution

    def patch_embed_forward(self, image: torch.Tensor) -> torch.Tensor:
        """``[B, 3, R, R]`` -> channels-last token map ``[B, R/p, R/p, C]``."""
        if image.ndim != 4 or image.shape[1] != 3 or \
                image.shape[2] != self.input_resolution or image.shape[3] != self.input_resolution:
            raise ValueError(f"expected [B, 3, {self.input_resolution}, {self.input_resolution}] "
                             f"image, got {tuple(image.shape)}")
        return self.patch_embed(image).permute(0, 2, 3, 1)

    def forward(self, image: torch.Tensor, injections) -> torch.Tensor:
        if len(injections) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} audio injections, got {len(injections)}")
        x = self.patch_embed_forward(image)
        for block, inject in zip(self.blocks, injections):
            x = block(x, inject)
        return check_finite(self.neck(x.permute(0, 3, 1, 2)), "encoder neck")

    def reference_forward(self, image: torch.Tensor) -> torch.Tensor:
        """Adapter-free encoder: plain ViT blocks followed by the neck."""
        x = self.patch_embed_forward(image)
        for block in self.blocks:
            x = block.vanilla_forward(x)
        return self.neck(x.permute(0, 3, 1, 2))
