from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from ..alignment import AlignmentInputs, gia_loss, lea_loss, lea_loss_fg_only, lea_similarities
from ..camcore import compute_cam, object_mask, split_patches
from ..encoder import EncoderConfig, FeatureBundle, VisionEncoder
from ..objective import gmp_logits, mlsm_loss, ptc_loss
from ..segmentor import SegHead, SegHeadConfig, par_refine, pseudo_labels, reg_loss, seg_loss
from ..textbank import ProjectionHeads, TextEmbeddingBank
from .config import TrainConfig


def _subseed(seed: int, k: int) -> int:
    return (seed * 1000003 + k) % (2**31 - 1)


class WeaklySegModel(nn.Module):
    """Encoder, both CAM classifiers, projection heads and the segmentation head.

    The text bank is held as non-trainable buffers.
    """

    def __init__(self, enc_cfg: EncoderConfig, head_cfg: SegHeadConfig, bank: TextEmbeddingBank,
                 proj_dim: int = 64, seed: int = 0):
        super().__init__()
        C = bank.num_classes
        if head_cfg.num_classes != C + 1:
            raise ValueError("seg head must predict C + 1 classes")
        self.class_names = tuple(bank.class_names)
        self.encoder = VisionEncoder(replace(enc_cfg, seed=_subseed(seed, 1)))
        d_v = enc_cfg.token_dim
        self.W_final = nn.Parameter(torch.empty(C, d_v))
        self.theta_inter = nn.Parameter(torch.empty(C, d_v))
        with torch.random.fork_rng(devices=[]), torch.no_grad():
            torch.manual_seed(_subseed(seed, 2))
            nn.init.trunc_normal_(self.W_final, std=0.02)
            nn.init.trunc_normal_(self.theta_inter, std=0.02)
        self.proj = ProjectionHeads(d_v, bank.d_t, proj_dim, seed=_subseed(seed, 3))
        self.seg_head = SegHead(head_cfg, seed=_subseed(seed, 4))
        self.register_buffer("t_fg", torch.tensor(bank.t_fg, dtype=torch.float32))
        self.register_buffer("t_bg", torch.tensor(bank.t_bg, dtype=torch.float32))

    def final_cams(self, feats: FeatureBundle) -> torch.Tensor:
        return compute_cam(feats.v_p, self.W_final)

    def inter_cams(self, feats: FeatureBundle) -> torch.Tensor:
        return compute_cam(feats.f_inter, self.theta_inter)

    def alignment_inputs(self, feats: FeatureBundle, mask: torch.Tensor, y: torch.Tensor) -> AlignmentInputs:
        b = mask.shape[0]
        v_fg, v_bg = split_patches(feats.v_p, mask)
        m = mask.reshape(b, -1, 1)
        vp = self.proj.visual_proj
        # re-mask after the affine map so masked-out rows stay exact zeros
        return AlignmentInputs(
            v_cls_proj=vp(feats.v_cls),
            v_fg_proj=vp(v_fg.reshape(b, -1, v_fg.shape[-1])) * m,
            v_bg_proj=vp(v_bg.reshape(b, -1, v_bg.shape[-1])) * (1 - m),
            t_fg_proj=self.proj.text_proj(self.t_fg),
            t_bg_proj=self.proj.text_proj(self.t_bg),
            y=y,
        )


@dataclass
class StepOutput:
    parts: dict
    mask: torch.Tensor


def training_losses(model: WeaklySegModel, images: torch.Tensor, y: torch.Tensor, cfg: TrainConfig,
                    with_seg: bool) -> StepOutput:
    """All loss terms for one batch; disabled terms are exact zeros."""
    feats = model.encoder(images)
    zero = images.new_zeros(())
    parts = {
        "cls": mlsm_loss(gmp_logits(feats.v_p, model.W_final), y),
        "inter": mlsm_loss(gmp_logits(feats.f_inter, model.theta_inter), y),
    }
    with torch.no_grad():
        mask = object_mask(model.inter_cams(feats), y, cfg.beta)

    inp = model.alignment_inputs(feats, mask, y)
    parts["im"] = gia_loss(inp, ccl=cfg.ccl_enabled) if cfg.gia_enabled else zero
    if not cfg.lea_enabled:
        parts["ex"] = zero
    elif cfg.ccl_enabled:
        parts["ex"] = lea_loss(lea_similarities(inp), cfg.tau, cfg.lam)
    else:
        parts["ex"] = lea_loss_fg_only(inp, cfg.tau)
    b = images.shape[0]
    v_p_proj = model.proj.visual_proj(feats.v_p.reshape(b, -1, feats.v_p.shape[-1]))
    parts["ptc"] = ptc_loss(v_p_proj, mask, cfg.tau) if cfg.lambda_p > 0 else zero

    if with_seg:
        size = images.shape[1:3]
        with torch.no_grad():
            pl = pseudo_labels(model.final_cams(feats), y, cfg.beta, size)
            onehot = torch.nn.functional.one_hot(pl, len(model.class_names) + 1)
            refined = par_refine(images, onehot.permute(0, 3, 1, 2).to(images.dtype), cfg.par_iters)
            pl = refined.argmax(1)
        logits = model.seg_head(feats.v_p, size)
        parts["seg"] = seg_loss(logits, pl)
        parts["reg"] = reg_loss(images, logits.softmax(1))
    else:
        parts["seg"] = zero
        parts["reg"] = zero
    return StepOutput(parts, mask)
