"""Lightweight two-way-attention mask decoder and the logit un-resize step.

A reduced SAM decoder: one learnable output token plus the audio prompt token
attend to the image embedding (and the embedding back to them) for two rounds,
the embedding is upscaled 4x with two transposed convolutions, and a
hypernetwork turns the output token into per-pixel weights for a single mask.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import LayerNorm2d
from .validation import check_finite


class MLP(nn.Module):
    def __init__(self, in_dim, hidden_dim, out_dim, num_layers):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        out = attn.softmax(dim=-1) @ v
        b, h, n, d = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * d))


class TwoWayBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_dim, skip_first_pe=False):
        super().__init__()
        self.self_attn = CrossAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.token_to_image = CrossAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, dim, 2)
        self.norm3 = nn.LayerNorm(dim)
        self.image_to_token = CrossAttention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.image_to_token(k, q, queries))
        return queries, keys


class MaskDecoder(nn.Module):
    def __init__(self, dim: int, num_heads: int = 2, depth: int = 2, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.output_token = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.layers = nn.ModuleList(
            TwoWayBlock(dim, num_heads, 2 * dim, skip_first_pe=(i == 0)) for i in range(depth))
        self.final_attn = CrossAttention(dim, num_heads)
        self.norm_final = nn.LayerNorm(dim)
        c4, c8 = max(dim // 4, 1), max(dim // 8, 1)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, c4, kernel_size=2, stride=2),
            LayerNorm2d(c4),
            nn.GELU(),
            nn.ConvTranspose2d(c4, c8, kernel_size=2, stride=2),
            nn.GELU())
        self.hypernet = MLP(dim, dim, c8, 3)
        # Fixed random Fourier features for the image positional encoding.
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("pe_gaussian", torch.randn(2, (dim + 1) // 2, generator=g))

    def dense_pe(self, h: int, w: int) -> torch.Tensor:
        ys = (torch.arange(h, dtype=self.pe_gaussian.dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=self.pe_gaussian.dtype) + 0.5) / w
        coords = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1) * 2 - 1
        proj = 2 * math.pi * coords @ self.pe_gaussian
        pe = torch.cat([proj.sin(), proj.cos()], dim=-1)[..., : self.dim]
        return pe.reshape(h * w, self.dim)

    def forward(self, embedding: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        """``embedding [B, P, H, W]``, ``prompt [B, 1, P]`` -> logits ``[B, 1, 4H, 4W]``.

        Unbatched ``[P, H, W]`` / ``[1, P]`` inputs give ``[1, 4H, 4W]``.
        """
        if embedding.ndim == 3:
            return self(embedding.unsqueeze(0), prompt.reshape(1, 1, -1))[0]
        if embedding.shape[1] != self.dim or prompt.shape[-1] != self.dim:
            raise ValueError(f"decoder width {self.dim} does not match embedding "
                             f"{embedding.shape[1]} / prompt {prompt.shape[-1]}")
        b, _, h, w = embedding.shape
        tokens = torch.cat([self.output_token.expand(b, 1, -1), prompt], dim=1)
        keys = embedding.flatten(2).transpose(1, 2)
        key_pe = self.dense_pe(h, w).unsqueeze(0)

        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        q, k = queries + tokens, keys + key_pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))

        src = keys.transpose(1, 2).reshape(b, self.dim, h, w)
        upscaled = self.upscale(src)
        weights = self.hypernet(queries[:, 0])
        masks = (weights.unsqueeze(1) @ upscaled.flatten(2)).view(b, 1, 4 * h, 4 * w)
        return check_finite(masks, "mask decoder")


def upscale_to_input(logits: torch.Tensor, padded_size: int, original_size) -> torch.Tensor:
    """Undo the input resize rule on a square logit map.

    Logits are bilinearly resized to ``padded_size``. A sample that was
    zero-padded (both sides smaller than ``padded_size``) is then cropped to
    its top-left ``h0 x w0`` region; otherwise it is resized to ``(h0, w0)``.
    Accepts ``[h, w]``, ``[B, h, w]`` or ``[B, 1, h, w]`` and returns the same rank.
    """
    h0, w0 = (int(v) for v in original_size)
    if logits.shape[-1] != logits.shape[-2]:
        raise ValueError(f"logits must be square, got {tuple(logits.shape[-2:])}")
    if h0 <= 0 or w0 <= 0 or padded_size <= 0:
        raise ValueError(f"invalid sizes padded={padded_size} original={(h0, w0)}")
    ndim = logits.ndim
    x = logits.reshape(-1, 1, *logits.shape[-2:])
    if x.shape[-1] != padded_size:
        x = F.interpolate(x, size=(padded_size, padded_size), mode="bilinear", align_corners=False)
    if h0 < padded_size and w0 < padded_size:
        x = x[..., :h0, :w0]
    elif (h0, w0) != (padded_size, padded_size):
        x = F.interpolate(x, size=(h0, w0), mode="bilinear", align_corners=False)
    return x.reshape(*logits.shape[: ndim - 2], h0, w0)
