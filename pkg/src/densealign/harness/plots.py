from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from ..alignment import cosine_matrix  # noqa: E402
from .model import WeaklySegModel  # noqa: E402
from .train import read_metrics  # noqa: E402


@torch.no_grad()
def similarity_maps(model: WeaklySegModel, image: np.ndarray) -> np.ndarray:
    """Cosine between projected patch tokens and each prompt: ``[C+1, N, N]`` (background last)."""
    feats = model.encoder(torch.from_numpy(image)[None])
    n = feats.v_p.shape[1]
    v = model.proj.visual_proj(feats.v_p.reshape(1, n * n, -1))[0]
    t = model.proj.text_proj(torch.cat([model.t_fg, model.t_bg[None]]))
    return cosine_matrix(v, t).T.reshape(-1, n, n).numpy()


def plot_similarity(model: WeaklySegModel, image: np.ndarray, path, title: str = "") -> Path:
    sims = similarity_maps(model, image)
    names = list(model.class_names) + ["background"]
    fig, axes = plt.subplots(1, len(names) + 1, figsize=(3 * (len(names) + 1), 3))
    axes[0].imshow(image)
    axes[0].set_title(title or "image")
    for ax, name, sim in zip(axes[1:], names, sims):
        im = ax.imshow(sim, cmap="jet", vmin=-1, vmax=1)
        ax.set_title(name)
    for ax in axes:
        ax.axis("off")
    fig.colorbar(im, ax=axes.tolist(), shrink=0.8)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_losses(metrics_csv, path, smooth: int = 25) -> Path:
    rows = read_metrics(metrics_csv)
    steps = np.array([r["step"] for r in rows])
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("total", "cls", "inter", "im", "ex", "ptc", "seg", "reg"):
        vals = np.array([r[key] for r in rows])
        if smooth > 1 and len(vals) >= smooth:
            vals = np.convolve(vals, np.ones(smooth) / smooth, mode="same")
        ax.plot(steps, vals, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(ncol=4, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
