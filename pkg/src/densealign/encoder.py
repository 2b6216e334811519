"""Compact patch-token transformer encoder.

Produces a class token, the final patch-token grid and the patch tokens
tapped after an intermediate block. Grids are channels-last, ``[N, N, d]``,
flattened row-major wherever a sequence is needed.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class SizingError(ValueError):
    pass


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    num_blocks: int = 4
    num_heads: int = 4
    token_dim: int = 64
    intermediate_block: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise SizingError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 1 <= self.intermediate_block < self.num_blocks:
            raise ValueError("intermediate_block must lie in [1, num_blocks)")
        if self.token_dim % self.num_heads:
            raise ValueError("token_dim must be divisible by num_heads")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class FeatureBundle:
    v_cls: torch.Tensor  # [B, d]
    v_p: torch.Tensor  # [B, N, N, d]
    f_inter: torch.Tensor  # [B, N, N, d]

    def flat_patches(self) -> torch.Tensor:
        b, h, w, d = self.v_p.shape
        return self.v_p.reshape(b, h * w, d)


def resize_pos_embed(pe: torch.Tensor, new_side) -> torch.Tensor:
    """Bilinearly resample a ``[g, g, d]`` positional grid to ``new_side``.

    ``new_side`` may be an int or an ``(rows, cols)`` pair. Uses half-pixel
    centres (``align_corners=False``), so an unchanged size is the identity.
    """
    if isinstance(new_side, int):
        new_side = (new_side, new_side)
    if pe.shape[0] < 1 or min(new_side) < 1:
        raise ValueError("grid sides must be >= 1")
    if tuple(pe.shape[:2]) == tuple(new_side):
        return pe
    grid = pe.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(grid, size=tuple(new_side), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    # pre-norm; GELU feed-forward with hidden ratio 4
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class VisionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d, p, g = cfg.token_dim, cfg.patch_size, cfg.grid_side
        self.patch_embed = nn.Linear(3 * p * p, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_cls = nn.Parameter(torch.zeros(1, d))
        self.pos_grid = nn.Parameter(torch.zeros(g, g, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads) for _ in range(cfg.num_blocks))
        self.norm = nn.LayerNorm(d)

        with torch.random.fork_rng(devices=[]), torch.no_grad():
            torch.manual_seed(cfg.seed)
            for t in (self.cls_token, self.pos_cls, self.pos_grid):
                nn.init.trunc_normal_(t, std=0.02)
            self.apply(_init_weights)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """``[B, H, W, 3]`` -> ``[B, H/p, W/p, 3*p*p]`` (row-major patches)."""
        b, h, w, c = images.shape
        p = self.cfg.patch_size
        x = images.reshape(b, h // p, p, w // p, p, c)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h // p, w // p, p * p * c)

    def forward(self, images: torch.Tensor) -> FeatureBundle:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        b, h, w, _ = images.shape
        p = self.cfg.patch_size
        if h < p or w < p or h % p or w % p:
            raise SizingError(f"image {h}x{w} not tileable by patch size {p}")
        if not torch.isfinite(images).all():
            raise ValueError("non-finite pixel values")
        gh, gw = h // p, w // p

        tokens = self.patch_embed(self.patchify(images))
        tokens = tokens + resize_pos_embed(self.pos_grid, (gh, gw))
        tokens = tokens.reshape(b, gh * gw, -1)
        cls = self.cls_token.expand(b, -1, -1) + self.pos_cls
        x = torch.cat([cls, tokens], dim=1)

        f_inter = None
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i == self.cfg.intermediate_block:
                f_inter = x[:, 1:].reshape(b, gh, gw, -1)
        x = self.norm(x)
        return FeatureBundle(
            v_cls=x[:, 0],
            v_p=x[:, 1:].reshape(b, gh, gw, -1),
            f_inter=f_inter,
        )


def encode(image: torch.Tensor, cfg: EncoderConfig, params: VisionEncoder | None = None) -> FeatureBundle:
    """Encode a single ``[H, W, 3]`` image (or a batch) with ``params``.

    When ``params`` is None a fresh encoder is built from ``cfg.seed``.
    """
    enc = params if params is not None else VisionEncoder(cfg)
    return enc(torch.as_tensor(image, dtype=torch.float32))
