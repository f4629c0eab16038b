"""Shared ViT building blocks: patch embedding, transformer blocks, adaLN blocks.

Plain pre-LN blocks with learned position embeddings; small enough to train
on a single CPU core.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn


class TransformerBlock(nn.Module):
    """Pre-LN self-attention + MLP block."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        if width % heads != 0:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


def modulate(x, shift, scale):
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class AdaLNBlock(nn.Module):
    """DiT-style block: LayerNorm modulation and gating driven by a conditioning vector."""

    def __init__(self, width: int, heads: int, cond_dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        if width % heads != 0:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 6 * width))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, cond):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(cond).chunk(6, dim=-1)
        y = modulate(self.norm1(x), shift1, scale1)
        x = x + gate1.unsqueeze(1) * self.attn(y, y, y, need_weights=False)[0]
        y = modulate(self.norm2(x), shift2, scale2)
        x = x + gate2.unsqueeze(1) * self.mlp(y)
        return x


class PatchEmbed(nn.Module):
    """Image to token sequence via a strided conv."""

    def __init__(self, image_size: int, patch_size: int, in_channels: int, width: int):
        super().__init__()
        if image_size % patch_size != 0:
            raise ValueError(f"image_size {image_size} not divisible by patch_size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.num_patches = self.grid * self.grid
        self.proj = nn.Conv2d(in_channels, width, kernel_size=patch_size, stride=patch_size)

    def forward(self, images):
        # images: (B, C, H, W)
        if images.ndim != 4 or images.shape[-1] != self.image_size or images.shape[-2] != self.image_size:
            raise ValueError(
                f"expected images of shape (B, C, {self.image_size}, {self.image_size}), got {tuple(images.shape)}"
            )
        x = self.proj(images)
        return x.flatten(2).transpose(1, 2)  # (B, T, width)


def unpatchify(tokens: torch.Tensor, patch_size: int, channels: int) -> torch.Tensor:
    """(B, T, p*p*c) token grid back to (B, c, H, W) images; T must be a square."""
    b, t, dim = tokens.shape
    grid = int(round(math.sqrt(t)))
    if grid * grid != t:
        raise ValueError(f"token count {t} is not a square grid")
    if dim != patch_size * patch_size * channels:
        raise ValueError(f"token dim {dim} != patch_size^2 * channels = {patch_size * patch_size * channels}")
    x = tokens.view(b, grid, grid, channels, patch_size, patch_size)
    x = x.permute(0, 3, 1, 4, 2, 5).contiguous()
    return x.view(b, channels, grid * patch_size, grid * patch_size)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of a (B,) timestep vector."""
    half = dim // 2
    dtype = t.dtype if t.is_floating_point() else torch.float32
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype).unsqueeze(-1) * freqs.unsqueeze(0)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def make_pos_embed(num_tokens: int, width: int) -> nn.Parameter:
    p = nn.Parameter(torch.zeros(1, num_tokens, width))
    nn.init.normal_(p, std=0.02)
    return p
