"""Single-stage training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..objective import NonFiniteLoss, assemble, to_float
from ..synthdata import Corpus, augment_image
from ..textbank import build_bank, load_bank
from .checkpoint import save_checkpoint
from .config import RunConfig, lr_at
from .model import WeaklySegModel, training_losses

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "cls", "inter", "im", "ex", "ptc", "seg", "reg", "total_l", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, breakdown: dict, reason: str):
        super().__init__(f"non-finite loss at step {step}: {reason}; breakdown={breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class TrainResult:
    model: WeaklySegModel
    config: RunConfig
    rows: list = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0


def training_pairs(corpus: Corpus) -> list:
    """(image, labels) only: ground-truth masks never reach the loop."""
    return [(s.image, s.labels) for s in corpus.train]


def make_bank(cfg: RunConfig, class_names):
    t = cfg.train
    if t.bank_path:
        bank = load_bank(t.bank_path, num_classes=len(class_names), d_t=t.d_t)
        if tuple(bank.class_names) != tuple(class_names):
            raise ValueError(f"bank classes {bank.class_names} != corpus classes {tuple(class_names)}")
        return bank
    return build_bank(class_names, t.d_t, t.bank_seed)


def build_model(cfg: RunConfig, class_names) -> WeaklySegModel:
    return WeaklySegModel(cfg.encoder, cfg.seghead, make_bank(cfg, class_names), cfg.train.proj_dim,
                          cfg.train.seed)


class BatchStream:
    """Epoch-shuffled batches; augmentation seeded by (seed, step, slot)."""

    def __init__(self, pairs, batch: int, seed: int, augment: bool):
        self.pairs = pairs
        self.batch = batch
        self.seed = seed
        self.augment = augment
        self.rng = np.random.default_rng([seed, 17])
        self.order = []

    def next(self, step: int):
        idx = []
        while len(idx) < self.batch:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.pairs)))
            idx.append(self.order.pop(0))
        images, labels = [], []
        for slot, i in enumerate(idx):
            image, y = self.pairs[i]
            if self.augment:
                image = augment_image(image, [self.seed, step, slot])
            images.append(image)
            labels.append(y)
        return torch.from_numpy(np.stack(images)), torch.from_numpy(np.stack(labels))


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (r[k] if k == "step" else repr(float(r[k]))) for k in METRIC_COLUMNS})


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def train(corpus: Corpus, cfg: RunConfig, out_dir=None, log_every: int = 0) -> TrainResult:
    tcfg = cfg.train
    torch.use_deterministic_algorithms(True)
    model = build_model(cfg, corpus.class_names)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=tcfg.warmup_lr, betas=(0.9, 0.999), eps=1e-8,
                            weight_decay=tcfg.weight_decay)
    stream = BatchStream(training_pairs(corpus), tcfg.batch, tcfg.seed, tcfg.augment)
    weights = tcfg.loss_weights
    rows = []
    t0 = time.perf_counter()
    model.train()
    for step in range(tcfg.iters):
        lr = lr_at(step, tcfg)
        for g in opt.param_groups:
            g["lr"] = lr
        images, y = stream.next(step)
        out = training_losses(model, images, y, tcfg, with_seg=step >= tcfg.seg_start_iter)
        try:
            bd = assemble(out.parts, weights)
        except NonFiniteLoss as exc:
            raise TrainingDiverged(step, {k: to_float(v) for k, v in out.parts.items()}, str(exc)) from exc
        if not torch.isfinite(bd.total):
            raise TrainingDiverged(step, bd.as_floats(), "total")
        opt.zero_grad(set_to_none=True)
        bd.total.backward()
        opt.step()
        rows.append({"step": step, "lr": lr, **bd.as_floats()})
        if log_every and (step % log_every == 0 or step == tcfg.iters - 1):
            r = rows[-1]
            log.info("step %d lr %.2e total %.4f cls %.4f inter %.4f im %.4f ex %.4f ptc %.4f seg %.4f",
                     step, lr, r["total"], r["cls"], r["inter"], r["im"], r["ex"], r["ptc"], r["seg"])
    model.eval()
    result = TrainResult(model, cfg, rows, seconds=time.perf_counter() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(rows, out / "metrics.csv")
        snapshot = rows[-1] if rows else {}
        result.checkpoint = save_checkpoint(model, cfg, tcfg.iters, out / "checkpoint", snapshot)
    return result
