"""Frozen prompt embeddings and the learnable projections into the shared space."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

BACKGROUND_PROMPT = "a photo of background"


def prompt_for(class_name: str) -> str:
    return f"a photo of {class_name}"


def prompt_embedding(prompt: str, d_t: int, seed: int) -> np.ndarray:
    """Unit vector determined only by ``(prompt, seed)``."""
    digest = hashlib.sha256(f"{seed}\x00{prompt}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(d_t)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class TextEmbeddingBank:
    class_names: tuple
    t_fg: np.ndarray  # [C, d_t], unit rows
    t_bg: np.ndarray  # [d_t]
    seed: int | None = None

    def __post_init__(self):
        self.t_fg.setflags(write=False)
        self.t_bg.setflags(write=False)

    @property
    def d_t(self) -> int:
        return self.t_fg.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def matrix(self) -> np.ndarray:
        """All C+1 rows, background last."""
        return np.vstack([self.t_fg, self.t_bg[None]])


def build_bank(class_names, d_t: int = 64, seed: int = 0) -> TextEmbeddingBank:
    names = tuple(class_names)
    if not names:
        raise ValueError("class_names must be non-empty")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate class names in {names}")
    t_fg = np.stack([prompt_embedding(prompt_for(n), d_t, seed) for n in names])
    t_bg = prompt_embedding(BACKGROUND_PROMPT, d_t, seed)
    return TextEmbeddingBank(names, t_fg, t_bg, seed)


def save_bank(bank: TextEmbeddingBank, path) -> Path:
    """Write ``<stem>.json`` plus the raw float32 matrix ``<stem>.f32``."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix_path = path.with_suffix(".f32")
    bank.matrix().astype("<f4").tofile(matrix_path)
    manifest = {
        "class_names": list(bank.class_names),
        "d_t": bank.d_t,
        "seed": bank.seed,
        "matrix": matrix_path.name,
    }
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_bank(path, num_classes: int | None = None, d_t: int | None = None) -> TextEmbeddingBank:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        names = tuple(manifest["class_names"])
        file_dt = int(manifest["d_t"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"malformed bank manifest {path}: {exc}") from exc
    matrix_path = path.parent / manifest.get("matrix", path.with_suffix(".f32").name)
    raw = np.fromfile(matrix_path, dtype="<f4")
    if file_dt <= 0 or raw.size % file_dt:
        raise ValueError(f"matrix size {raw.size} incompatible with d_t={file_dt}")
    rows = raw.reshape(-1, file_dt).astype(np.float64)
    if rows.shape[0] != len(names) + 1:
        raise ValueError(
            f"bank has {rows.shape[0]} rows, manifest lists {len(names)} classes + background")
    if num_classes is not None and len(names) != num_classes:
        raise ValueError(f"bank holds {len(names)} classes, config expects {num_classes}")
    if d_t is not None and file_dt != d_t:
        raise ValueError(f"bank d_t={file_dt}, config expects {d_t}")
    if len(set(names)) != len(names):
        raise ValueError("duplicate class names in bank")
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if not np.all(np.isfinite(rows)) or np.any(norms == 0):
        raise ValueError("bank rows must be finite and non-zero")
    rows = rows / norms
    return TextEmbeddingBank(names, rows[:-1].copy(), rows[-1].copy(), manifest.get("seed"))


class ProjectionHeads(nn.Module):
    """Affine maps from the visual and text spaces into the shared space."""

    def __init__(self, d_v: int, d_t: int, d: int = 64, seed: int = 0):
        super().__init__()
        self.visual_proj = nn.Linear(d_v, d)
        self.text_proj = nn.Linear(d_t, d)
        with torch.random.fork_rng(devices=[]), torch.no_grad():
            torch.manual_seed(seed)
            for lin in (self.visual_proj, self.text_proj):
                nn.init.trunc_normal_(lin.weight, std=0.02)
                nn.init.zeros_(lin.bias)
