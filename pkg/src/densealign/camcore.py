"""Class activation maps, object-aware masks and the foreground/background split.

Feature grids are channels-last ``[..., N, N, d]``; CAM stacks are
``[..., C, N, N]``. Leading batch dimensions are optional throughout.
"""
from __future__ import annotations

import torch

ZERO_MAX_EPS = 1e-8


def class_scores(F: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """A_c = sum_i W[c, i] * F[..., i], returned as ``[..., C, N, N]``."""
    if F.shape[-1] != W.shape[-1]:
        raise ValueError(f"feature dim {F.shape[-1]} != classifier dim {W.shape[-1]}")
    return torch.einsum("...hwd,cd->...chw", F, W)


def compute_cam(F: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    if not (torch.isfinite(F).all() and torch.isfinite(W).all()):
        raise ValueError("non-finite input to compute_cam")
    a = torch.relu(class_scores(F, W))
    peak = a.amax(dim=(-2, -1), keepdim=True)
    # maps with no positive activation are defined as all-zero
    live = peak >= ZERO_MAX_EPS
    return torch.where(live, a / torch.where(live, peak, torch.ones_like(peak)), torch.zeros_like(a))


def _present(labels: torch.Tensor) -> torch.Tensor:
    present = labels > 0
    if not present.any(dim=-1).all():
        raise ValueError("object mask needs at least one present class per image")
    return present


def object_mask(inter_cams: torch.Tensor, labels: torch.Tensor, beta: float = 0.5) -> torch.Tensor:
    """Binary ``[..., N, N]`` map: 1 where the max over present-class CAMs exceeds beta."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    present = _present(labels)
    masked = torch.where(present[..., :, None, None], inter_cams, torch.full_like(inter_cams, -1.0))
    return (masked.amax(dim=-3) > beta).to(inter_cams.dtype)


def split_patches(v_p: torch.Tensor, m: torch.Tensor):
    if v_p.shape[:-1] != m.shape:
        raise ValueError(f"patch grid {tuple(v_p.shape[:-1])} vs mask {tuple(m.shape)}")
    m = m.unsqueeze(-1).to(v_p.dtype)
    return v_p * m, v_p * (1 - m)
