"""Loss-configuration ablation grid: {GIA, LEA, both} x {without, with} cross-contrast."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..synthdata import Corpus
from .config import RunConfig
from .evaluate import evaluate
from .train import train

log = logging.getLogger(__name__)

METHODS = {"GIA": (True, False), "LEA": (False, True), "GIA+LEA": (True, True)}
SEEDS = (0, 1, 2)


@dataclass
class Cell:
    method: str
    ccl: bool
    mious: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.mious))

    @property
    def std(self) -> float:
        return float(np.std(self.mious))


def grid():
    for ccl in (False, True):
        for method in METHODS:
            yield method, ccl


def cell_config(base: RunConfig, method: str, ccl: bool, seed: int) -> RunConfig:
    gia, lea = METHODS[method]
    return base.with_overrides({
        "train.gia_enabled": gia,
        "train.lea_enabled": lea,
        "train.ccl_enabled": ccl,
        "train.seed": seed,
    })


def run_cam_miou(corpus: Corpus, cfg: RunConfig) -> float:
    result = train(corpus, cfg)
    return evaluate(result.model, corpus.val, "cam_pseudo", cfg.train.beta).miou


def ablate(corpus: Corpus, base: RunConfig, seeds=SEEDS, runner=run_cam_miou) -> list:
    cells = []
    for method, ccl in grid():
        mious = []
        for seed in seeds:
            miou = runner(corpus, cell_config(base, method, ccl, seed))
            log.info("%s ccl=%s seed=%d cam mIoU %.4f", method, ccl, seed, miou)
            mious.append(miou)
        cells.append(Cell(method, ccl, mious))
    return cells


def write_table(cells, path) -> Path:
    path = Path(path)
    n = max(len(c.mious) for c in cells)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "gia", "lea", "ccl", "mean_miou", "std_miou"] + [f"seed_{i}" for i in range(n)])
        for c in cells:
            gia, lea = METHODS[c.method]
            writer.writerow([c.method, int(gia), int(lea), int(c.ccl), f"{c.mean:.6f}", f"{c.std:.6f}"]
                            + [f"{m:.6f}" for m in c.mious])
    return path
