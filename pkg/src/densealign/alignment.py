"""Image-text alignment losses in the shared embedding space.

Global alignment pulls the projected class token towards the text embeddings
of the present classes and away from the background embedding. Local
alignment contrasts masked foreground/background patch tokens against the
same two kinds of text embedding with a two-way InfoNCE per patch.

All functions accept an optional leading batch dimension; losses are
per-image values averaged over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

NORM_EPS = 1e-8
SIM_CLAMP = 1e-6


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    # max(||x||, eps) with a finite gradient at x = 0
    return torch.sqrt(torch.clamp((x * x).sum(-1), min=NORM_EPS**2))


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine along the last axis; zero vectors give 0."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    return (a * b).sum(-1) / (_safe_norm(a) * _safe_norm(b))


def cosine_matrix(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``[..., n, d] x [m, d] -> [..., n, m]``."""
    num = x @ y.transpose(-1, -2)
    return num / (_safe_norm(x)[..., :, None] * _safe_norm(y)[None, :])


@dataclass
class AlignmentInputs:
    v_cls_proj: torch.Tensor  # [..., d]
    v_fg_proj: torch.Tensor  # [..., N*N, d]
    v_bg_proj: torch.Tensor  # [..., N*N, d]
    t_fg_proj: torch.Tensor  # [C, d]
    t_bg_proj: torch.Tensor  # [d]
    y: torch.Tensor  # [..., C]

    def __post_init__(self):
        if not (self.y > 0).any(-1).all():
            raise ValueError("every image needs at least one positive label")


@dataclass
class LeaSimilarities:
    s_fg_pos: torch.Tensor
    s_fg_neg: torch.Tensor
    s_bg_pos: torch.Tensor
    s_bg_neg: torch.Tensor


def rescaled_sim(x: torch.Tensor) -> torch.Tensor:
    """Map a cosine from [-1, 1] into the open unit interval for the log."""
    return torch.clamp((x + 1) / 2, SIM_CLAMP, 1 - SIM_CLAMP)


def gia_loss(inp: AlignmentInputs, ccl: bool = True) -> torch.Tensor:
    y = inp.y.to(inp.v_cls_proj.dtype)
    fg = cosine(inp.v_cls_proj[..., None, :], inp.t_fg_proj)  # [..., C]
    loss = -(y * torch.log(rescaled_sim(fg))).sum(-1)
    if ccl:
        bg = cosine(inp.v_cls_proj, inp.t_bg_proj)
        loss = loss - torch.log(1 - rescaled_sim(bg))
    return loss.mean()


def lea_similarities(inp: AlignmentInputs) -> LeaSimilarities:
    y = inp.y.to(inp.v_fg_proj.dtype)[..., None, :]  # [..., 1, C]
    t_bg = inp.t_bg_proj.reshape(1, -1)
    return LeaSimilarities(
        s_fg_pos=(cosine_matrix(inp.v_fg_proj, inp.t_fg_proj) * y).sum(-1),
        s_fg_neg=cosine_matrix(inp.v_fg_proj, t_bg)[..., 0],
        s_bg_pos=cosine_matrix(inp.v_bg_proj, t_bg)[..., 0],
        s_bg_neg=(cosine_matrix(inp.v_bg_proj, inp.t_fg_proj) * y).sum(-1),
    )


def lea_loss(s: LeaSimilarities, tau: float = 1.0, lam: float = 0.001) -> torch.Tensor:
    if tau <= 0:
        raise ValueError("tau must be positive")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    # log(e^a / (e^a + e^b)) == logsigmoid(a - b)
    fg = -F.logsigmoid((s.s_fg_pos - s.s_fg_neg) / tau).mean(-1)
    bg = -F.logsigmoid((s.s_bg_pos - s.s_bg_neg) / tau).mean(-1)
    return (fg + lam * bg).mean()


def lea_loss_fg_only(inp: AlignmentInputs, tau: float = 1.0) -> torch.Tensor:
    """Local alignment without the background pairs.

    Foreground patches keep the summed present-class similarity as the
    positive logit and are contrasted against each absent class's text
    embedding. Images whose labels cover every class contribute zero.
    """
    y = inp.y.to(inp.v_fg_proj.dtype)
    sims = cosine_matrix(inp.v_fg_proj, inp.t_fg_proj)  # [..., P, C]
    pos = (sims * y[..., None, :]).sum(-1, keepdim=True)
    neg = sims.masked_fill(y[..., None, :] > 0, float("-inf"))
    logits = torch.cat([pos, neg], dim=-1) / tau
    nll = torch.logsumexp(logits, dim=-1) - logits[..., 0]
    return nll.mean(-1).mean()
