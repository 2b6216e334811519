"""Segmentation head, pseudo labels, pixel-adaptive refinement and the seg-side losses.

Label maps use index 0 for background and ``c + 1`` for foreground class c.
Probability/logit stacks are channels-first ``[..., C+1, H, W]``; images are
channels-last ``[..., H, W, 3]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

PAR_DILATIONS = (1, 2, 4)
PAR_SIGMA_RGB = 0.3
REG_SIGMA = 0.15

_NEIGHBOURS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


@dataclass
class SegHeadConfig:
    in_dim: int = 64
    hidden_dim: int = 64
    num_classes: int = 4  # foreground classes + background

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes counts background and must be >= 2")


class SegHead(nn.Module):
    """conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv1x1, then bilinear upsampling."""

    def __init__(self, cfg: SegHeadConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(cfg.in_dim, cfg.hidden_dim, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.hidden_dim, cfg.hidden_dim, 3, padding=1)
        self.pred = nn.Conv2d(cfg.hidden_dim, cfg.num_classes, 1)
        with torch.random.fork_rng(devices=[]), torch.no_grad():
            torch.manual_seed(seed)
            for conv in (self.conv1, self.conv2, self.pred):
                nn.init.trunc_normal_(conv.weight, std=0.02)
                nn.init.zeros_(conv.bias)

    def forward(self, v_p: torch.Tensor, out_size) -> torch.Tensor:
        squeeze = v_p.dim() == 3
        if squeeze:
            v_p = v_p.unsqueeze(0)
        if v_p.shape[-1] != self.cfg.in_dim:
            raise ValueError(f"expected {self.cfg.in_dim} channels, got {v_p.shape[-1]}")
        x = v_p.permute(0, 3, 1, 2)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = self.pred(x)
        if isinstance(out_size, int):
            out_size = (out_size, out_size)
        x = F.interpolate(x, size=tuple(out_size), mode="bilinear", align_corners=False)
        return x[0] if squeeze else x


def seg_forward(v_p: torch.Tensor, cfg: SegHeadConfig, params: SegHead, out_size) -> torch.Tensor:
    if params.cfg != cfg:
        raise ValueError("head parameters were built for a different config")
    return params(v_p, out_size)


def upsample_cams(cams: torch.Tensor, size) -> torch.Tensor:
    if isinstance(size, int):
        size = (size, size)
    lead = cams.shape[:-2]
    flat = cams.reshape(-1, 1, *cams.shape[-2:])
    up = F.interpolate(flat, size=tuple(size), mode="bilinear", align_corners=False)
    return up.reshape(*lead, *size)


def pseudo_labels(cams: torch.Tensor, labels: torch.Tensor, beta: float, size) -> torch.Tensor:
    """Threshold the upsampled present-class CAMs at beta; argmax picks the class."""
    up = upsample_cams(cams, size)
    present = (labels > 0)[..., :, None, None]
    up = torch.where(present, up, torch.full_like(up, -1.0))
    best, idx = up.max(dim=-3)  # first maximal index on ties
    return torch.where(best > beta, idx + 1, torch.zeros_like(idx))


def _check_simplex(prob: torch.Tensor, tol: float = 1e-5):
    if (prob < -tol).any() or ((prob.sum(-3) - 1).abs() > tol).any():
        raise ValueError("prob must lie on the per-pixel simplex")


def _shift(padded: torch.Tensor, pad: int, dy: int, dx: int, h: int, w: int) -> torch.Tensor:
    return padded[..., pad + dy:pad + dy + h, pad + dx:pad + dx + w]


def par_kernel(image: torch.Tensor, sigma_rgb: float = PAR_SIGMA_RGB,
               dilations=PAR_DILATIONS) -> torch.Tensor:
    """Affinity weights ``[B, K, H, W]`` over the dilated 8-neighbourhoods (softmax over K)."""
    img = image.permute(0, 3, 1, 2)
    h, w = img.shape[-2:]
    pad = max(dilations)
    padded = F.pad(img, (pad,) * 4, mode="replicate")
    logits = []
    for d in dilations:
        for dy, dx in _NEIGHBOURS:
            diff = img - _shift(padded, pad, dy * d, dx * d, h, w)
            logits.append(-(diff * diff).sum(1) / (2 * sigma_rgb**2))
    return torch.stack(logits, dim=1).softmax(dim=1)


def par_refine(image: torch.Tensor, prob: torch.Tensor, iters: int = 10,
               sigma_rgb: float = PAR_SIGMA_RGB, dilations=PAR_DILATIONS) -> torch.Tensor:
    if iters < 0:
        raise ValueError("iters must be >= 0")
    _check_simplex(prob)
    if iters == 0:
        return prob
    squeeze = prob.dim() == 3
    if squeeze:
        image, prob = image.unsqueeze(0), prob.unsqueeze(0)
    kernel = par_kernel(image.to(prob.dtype), sigma_rgb, dilations)
    h, w = prob.shape[-2:]
    pad = max(dilations)
    offsets = [(dy * d, dx * d) for d in dilations for dy, dx in _NEIGHBOURS]
    for _ in range(iters):
        padded = F.pad(prob, (pad,) * 4, mode="replicate")
        out = torch.zeros_like(prob)
        for k, (dy, dx) in enumerate(offsets):
            out = out + kernel[:, k:k + 1] * _shift(padded, pad, dy, dx, h, w)
        prob = out
    return prob[0] if squeeze else prob


def seg_loss(logits: torch.Tensor, pl: torch.Tensor) -> torch.Tensor:
    if logits.dim() == 3:
        logits, pl = logits.unsqueeze(0), pl.unsqueeze(0)
    if logits.shape[-2:] != pl.shape[-2:]:
        raise ValueError("logits and pseudo labels differ in size")
    return F.cross_entropy(logits, pl.long())


def reg_loss(image: torch.Tensor, prob: torch.Tensor, sigma: float = REG_SIGMA) -> torch.Tensor:
    """Colour-weighted L1 smoothness over 4-neighbour pixel pairs."""
    if prob.dim() == 3:
        image, prob = image.unsqueeze(0), prob.unsqueeze(0)
    img = image.permute(0, 3, 1, 2).to(prob.dtype)
    terms = []
    for a, b, pa, pb in (
        (img[..., :, 1:], img[..., :, :-1], prob[..., :, 1:], prob[..., :, :-1]),
        (img[..., 1:, :], img[..., :-1, :], prob[..., 1:, :], prob[..., :-1, :]),
    ):
        wgt = torch.exp(-((a - b) ** 2).sum(1) / (2 * sigma**2))
        terms.append((wgt * (pa - pb).abs().sum(1)).flatten(1))
    return torch.cat(terms, dim=1).mean(1).mean()


def palette(num_colors: int = 256) -> list:
    """VOC-style bit-interleaved palette; index 0 is black."""
    pal = []
    for i in range(num_colors):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal.extend((r, g, b))
    return pal


def save_label_png(labels, path):
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    img = Image.frombytes("P", (arr.shape[1], arr.shape[0]), arr.tobytes())
    img.putpalette(palette())
    img.save(path)


def load_label_png(path) -> np.ndarray:
    return np.array(Image.open(path))
