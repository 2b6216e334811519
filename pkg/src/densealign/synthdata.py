"""Deterministic synthetic shapes corpus.

Every sample is rendered from its own seed derived from ``(corpus seed, split,
index)``, so generation order and worker count do not change the result.
Images are quantised to multiples of 1/255 at render time, which makes the
PNG round trip through :func:`save_corpus` / :func:`load_corpus` lossless.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .segmentor import load_label_png, save_label_png

MIN_CLASS_PIXELS = 16
SPLITS = {"train": 0, "val": 1}

BASE_COLORS = {
    "disk": (0.85, 0.20, 0.20),
    "square": (0.20, 0.80, 0.25),
    "triangle": (0.20, 0.30, 0.90),
}


@dataclass
class CorpusConfig:
    num_train: int = 500
    num_val: int = 100
    classes: tuple = ("disk", "square", "triangle")
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    noise_corr_px: int = 8
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if self.num_train < 1 or self.num_val < 1:
            raise ValueError("sample counts must be >= 1")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be distinct")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        unknown = [c for c in self.classes if c not in BASE_COLORS]
        if unknown:
            raise ValueError(f"no renderer for classes {unknown}")


@dataclass
class Sample:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    labels: np.ndarray  # [C] int64 in {0, 1}
    gt_mask: np.ndarray  # [H, W] uint8, 0 = background
    id: str = ""


@dataclass
class Corpus:
    config: CorpusConfig
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)

    @property
    def class_names(self) -> tuple:
        return self.config.classes


def labels_from_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(mask.reshape(-1), minlength=num_classes + 1)[1:num_classes + 1]
    return (counts >= MIN_CLASS_PIXELS).astype(np.int64)


def _background(rng, size: int, corr: int) -> np.ndarray:
    side = size // corr + 1
    coarse = torch.from_numpy(rng.uniform(0.0, 1.0, (1, 3, side, side)))
    up = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=True)
    return 0.2 + 0.6 * up[0].permute(1, 2, 0).numpy()


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == "square":
        h = 0.85 * r
        return (np.abs(xx - cx) <= h) & (np.abs(yy - cy) <= h)
    if kind == "triangle":
        top, base = cy - r, cy + 0.8 * r
        # apex at top, base spanning cx +/- r
        half = r * (yy - top) / (base - top)
        return (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= half)
    raise ValueError(f"unknown shape {kind!r}")


def render_sample(cfg: CorpusConfig, split: str, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, SPLITS[split], index])
    size = cfg.image_size
    C = len(cfg.classes)
    while True:
        image = _background(rng, size, cfg.noise_corr_px)
        mask = np.zeros((size, size), dtype=np.uint8)
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        for _ in range(n_obj):
            c = int(rng.integers(C))
            r = rng.uniform(0.11, 0.22) * size
            cx, cy = rng.uniform(r, size - r, 2)
            color = np.clip(np.array(BASE_COLORS[cfg.classes[c]]) + rng.uniform(-0.1, 0.1, 3), 0, 1)
            region = _shape_mask(cfg.classes[c], size, cx, cy, r)
            image[region] = color
            mask[region] = c + 1
        image = np.clip(image + rng.uniform(-0.03, 0.03, image.shape), 0, 1)
        labels = labels_from_mask(mask, C)
        if labels.any():
            break
    image = np.round(image * 255).astype(np.float32) / np.float32(255)
    return Sample(image, labels, mask, f"{split}_{index:04d}")


def _render_args(args):
    return render_sample(*args)


def generate(cfg: CorpusConfig, workers: int = 1) -> Corpus:
    jobs = [(cfg, "train", i) for i in range(cfg.num_train)]
    jobs += [(cfg, "val", i) for i in range(cfg.num_val)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(_render_args, jobs, chunksize=16))
    else:
        samples = [_render_args(j) for j in jobs]
    return Corpus(cfg, samples[:cfg.num_train], samples[cfg.num_train:])


def _resize_image(image: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def _resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    src = np.minimum(((np.arange(size) + 0.5) * mask.shape[0] / size).astype(int), mask.shape[0] - 1)
    return mask[np.ix_(src, src)]


def _draw_params(rng, size: int, flip, crop, jitter):
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if crop is None:
        side = int(round(size * rng.uniform(0.8, 1.0)))
        top, left = (int(v) for v in rng.integers(0, size - side + 1, 2))
        crop = (top, left, side)
    if jitter is None:
        jitter = rng.uniform(-0.1, 0.1, 3)
    return flip, crop, jitter


def _transform_image(image: np.ndarray, flip, crop, jitter) -> np.ndarray:
    size = image.shape[0]
    if flip:
        image = image[:, ::-1]
    if crop is not False:
        top, left, side = crop
        image = _resize_image(image[top:top + side, left:left + side], size)
    image = np.clip(image + np.asarray(jitter, dtype=np.float32), 0.0, 1.0)
    return np.ascontiguousarray(image, dtype=np.float32)


def augment(s: Sample, seed, flip=None, crop=None, jitter=None) -> Sample:
    """Random flip, crop-and-resize (scale 0.8-1.0) and colour jitter (+/-0.1).

    Each of ``flip``, ``crop`` and ``jitter`` may be forced: ``flip`` a bool,
    ``crop`` a ``(top, left, side)`` box or False to skip, ``jitter`` a
    length-3 offset. The mask follows with nearest-neighbour resampling and
    labels are recomputed from it. If the crop removes every labelled object
    the input sample is returned unchanged.
    """
    size = s.image.shape[0]
    flip, crop, jitter = _draw_params(np.random.default_rng(seed), size, flip, crop, jitter)
    image = _transform_image(s.image, flip, crop, jitter)
    mask = s.gt_mask[:, ::-1] if flip else s.gt_mask
    if crop is not False:
        top, left, side = crop
        mask = _resize_nearest(mask[top:top + side, left:left + side], size)
    labels = labels_from_mask(mask, len(s.labels))
    if not labels.any():
        return s
    return Sample(image, labels, np.ascontiguousarray(mask), s.id)


def augment_image(image: np.ndarray, seed) -> np.ndarray:
    """The same random transform as :func:`augment`, for label-only training pairs.

    No mask is involved, so image-level labels pass through unchanged.
    """
    params = _draw_params(np.random.default_rng(seed), image.shape[0], None, None, None)
    return _transform_image(image, *params)


def save_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    names = corpus.class_names
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "labels"])
        for s in corpus.train + corpus.val:
            Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(out / "images" / f"{s.id}.png")
            save_label_png(s.gt_mask, out / "masks" / f"{s.id}.png")
            writer.writerow([s.id, ",".join(n for n, on in zip(names, s.labels) if on)])
    cfg = asdict(corpus.config)
    cfg["classes"] = list(cfg["classes"])
    manifest = {
        "config": cfg,
        "seed": corpus.config.seed,
        "train_ids": [s.id for s in corpus.train],
        "val_ids": [s.id for s in corpus.val],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_corpus(data_dir) -> Corpus:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = CorpusConfig(**manifest["config"])
    with open(root / "labels.csv", newline="") as fh:
        rows = {r["id"]: r["labels"] for r in csv.DictReader(fh)}
    index = {n: i for i, n in enumerate(cfg.classes)}

    def load(sid):
        image = np.asarray(Image.open(root / "images" / f"{sid}.png").convert("RGB"), dtype=np.float32) / np.float32(255)
        mask = load_label_png(root / "masks" / f"{sid}.png").astype(np.uint8)
        labels = np.zeros(len(cfg.classes), dtype=np.int64)
        for name in filter(None, rows[sid].split(",")):
            labels[index[name]] = 1
        return Sample(image, labels, mask, sid)

    return Corpus(cfg, [load(i) for i in manifest["train_ids"]], [load(i) for i in manifest["val_ids"]])
