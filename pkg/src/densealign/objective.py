"""Classification losses, the patch-token contrast term, and total-loss assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .alignment import cosine_matrix
from .camcore import class_scores

PART_NAMES = ("cls", "inter", "im", "ex", "ptc", "seg", "reg")


@dataclass
class LossWeights:
    lambda_i: float = 1.0
    lambda_e: float = 1.0
    lambda_p: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    cls: object
    inter: object
    im: object
    ex: object
    ptc: object
    seg: object
    reg: object
    total_l: object
    total: object

    def as_floats(self) -> dict:
        return {f.name: to_float(getattr(self, f.name)) for f in fields(self)}


def to_float(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


class NonFiniteLoss(ValueError):
    pass


def gmp_logits(features: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """Score map per class followed by a spatial max: ``[..., N, N, d] -> [..., C]``."""
    return class_scores(features, W).amax(dim=(-2, -1))


def mlsm_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Multi-label soft margin: class-averaged logistic loss, batch-averaged."""
    y = y.to(logits.dtype)
    per_class = F.binary_cross_entropy_with_logits(logits, y, reduction="none")
    return per_class.mean(-1).mean()


def _ptc_single(v: torch.Tensor, m: torch.Tensor, tau: float) -> torch.Tensor:
    side = m.reshape(-1) > 0.5
    n_fg = int(side.sum())
    if n_fg == 0 or n_fg == side.numel():
        return v.new_zeros(())
    sims = cosine_matrix(v, v) / tau
    same = side[:, None] == side[None, :]
    eye = torch.eye(side.numel(), dtype=torch.bool)
    pos = same & ~eye
    if not pos.any():
        return v.new_zeros(())
    opp = ~same
    # log of the mean exponentiated negative logit, per anchor
    neg = torch.logsumexp(sims.masked_fill(~opp, float("-inf")), dim=1) - torch.log(
        opp.sum(1).to(v.dtype))
    pair = F.softplus(neg[:, None] - sims)
    return pair[pos].mean()


def ptc_loss(v_p_proj: torch.Tensor, m: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Mask-supervised token contrast.

    For each anchor patch and each other patch on the same mask side, a
    two-way InfoNCE against the anchor's opposite-side patches (their
    exponentiated logits averaged). Zero when a side is empty.
    ``v_p_proj`` is ``[..., P, d]`` and ``m`` is ``[..., N, N]`` with N*N = P.
    """
    if v_p_proj.dim() == 2:
        return _ptc_single(v_p_proj, m, tau)
    m = m.reshape(m.shape[0], -1)
    if m.shape[1] != v_p_proj.shape[1]:
        raise ValueError("mask and patch counts differ")
    return torch.stack([_ptc_single(v, mm, tau) for v, mm in zip(v_p_proj, m)]).mean()


def assemble(parts: dict, w: LossWeights) -> LossBreakdown:
    for name in PART_NAMES:
        if name not in parts:
            raise KeyError(f"missing loss term {name!r}")
        value = to_float(parts[name])
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss term {name!r} is not finite: {value}")
    p = parts
    total_l = p["cls"] + p["inter"] + w.lambda_i * p["im"] + w.lambda_e * p["ex"] + w.lambda_p * p["ptc"]
    total = total_l + p["seg"] + p["reg"]
    return LossBreakdown(**{n: p[n] for n in PART_NAMES}, total_l=total_l, total=total)
