"""Checkpoint directory: ``manifest.json`` plus one raw ``<f4`` file per tensor."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..textbank import TextEmbeddingBank
from .config import RunConfig
from .model import WeaklySegModel


def save_checkpoint(model: WeaklySegModel, cfg: RunConfig, step: int, out_dir, metrics: dict | None = None) -> Path:
    out = Path(out_dir)
    pdir = out / "params"
    pdir.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in model.state_dict().items():
        fname = f"{name}.f32"
        t.detach().cpu().numpy().astype("<f4").tofile(pdir / fname)
        tensors[name] = {"file": f"params/{fname}", "shape": list(t.shape)}
    manifest = {
        "config": cfg.to_dict(),
        "class_names": list(model.class_names),
        "step": step,
        "metrics": metrics or {},
        "tensors": tensors,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_checkpoint(ckpt_dir):
    """Returns ``(model, run_config, manifest)``."""
    root = Path(ckpt_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = RunConfig.from_dict(manifest["config"])
    state = {}
    for name, meta in manifest["tensors"].items():
        arr = np.fromfile(root / meta["file"], dtype="<f4").reshape(meta["shape"])
        state[name] = torch.from_numpy(arr.astype(np.float32))
    names = tuple(manifest["class_names"])
    bank = TextEmbeddingBank(names, state["t_fg"].double().numpy(), state["t_bg"].double().numpy())
    model = WeaklySegModel(cfg.encoder, cfg.seghead, bank, cfg.train.proj_dim, cfg.train.seed)
    model.load_state_dict(state)
    return model, cfg, manifest
