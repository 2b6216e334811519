from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..segmentor import pseudo_labels
from .model import WeaklySegModel

SOURCES = ("cam_pseudo", "segmentation")


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows index ground truth, columns prediction."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    return np.bincount(num_classes * gt + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


@dataclass
class EvalReport:
    per_class_iou: np.ndarray  # NaN where a class is in neither prediction nor ground truth
    miou: float
    source: str
    confusion: np.ndarray

    @classmethod
    def from_confusion(cls, conf: np.ndarray, source: str) -> "EvalReport":
        tp = np.diag(conf).astype(np.float64)
        union = conf.sum(0) + conf.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, tp / union, np.nan)
        return cls(iou, float(np.nanmean(iou)), source, conf)

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "miou": self.miou,
            "per_class_iou": [None if math.isnan(v) else float(v) for v in self.per_class_iou],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path


@torch.no_grad()
def predict(model: WeaklySegModel, images: torch.Tensor, labels: torch.Tensor, source: str,
            beta: float) -> torch.Tensor:
    feats = model.encoder(images)
    size = images.shape[1:3]
    if source == "cam_pseudo":
        return pseudo_labels(model.final_cams(feats), labels, beta, size)
    if source == "segmentation":
        return model.seg_head(feats.v_p, size).argmax(1)
    raise ValueError(f"source must be one of {SOURCES}")


def evaluate(model: WeaklySegModel, samples, source: str = "cam_pseudo", beta: float = 0.5,
             batch: int = 25) -> EvalReport:
    if not samples:
        raise ValueError("empty validation set")
    model.eval()
    K = len(model.class_names) + 1
    conf = np.zeros((K, K), dtype=np.int64)
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        labels = torch.from_numpy(np.stack([s.labels for s in chunk]))
        pred = predict(model, images, labels, source, beta).numpy()
        for p, s in zip(pred, chunk):
            conf += confusion(p, s.gt_mask, K)
    return EvalReport.from_confusion(conf, source)


def evaluate_checkpoint(ckpt_dir, samples, source: str = "cam_pseudo") -> EvalReport:
    from .checkpoint import load_checkpoint

    model, cfg, _ = load_checkpoint(ckpt_dir)
    return evaluate(model, samples, source, cfg.train.beta)
