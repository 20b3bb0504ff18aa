"""Loss curves and voxel projections rendered to image files."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import grid_from_json  # noqa: E402


def save_projections(grids, out_dir, level_ids=None) -> list[Path]:
    """Top-down (x-z) and front (x-y) max projections, one PNG per level."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    level_ids = level_ids or list(range(1, len(grids) + 1))
    paths = []
    for g, l in zip(grids, level_ids):
        g = np.asarray(g, dtype=bool)
        fig, (a, b) = plt.subplots(1, 2, figsize=(7, 3.4))
        a.imshow(g.any(axis=1).T, origin="lower", cmap="Greys", interpolation="nearest")
        a.set_title(f"level {l} top-down")
        a.set_xlabel("x")
        a.set_ylabel("z")
        b.imshow(g.any(axis=2).T, origin="lower", cmap="Greys", interpolation="nearest")
        b.set_title(f"level {l} front")
        b.set_xlabel("x")
        b.set_ylabel("y")
        fig.tight_layout()
        p = out / f"level{l}.png"
        fig.savefig(p, dpi=80)
        plt.close(fig)
        paths.append(p)
    return paths


def plot_history(history_path, out_dir) -> Path:
    hist = json.loads(Path(history_path).read_text())
    epochs = hist["epochs"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.4))
    a.plot([e["train_loss"] for e in epochs], label="train")
    if epochs and "val_loss" in epochs[0]:
        a.plot([e["val_loss"] for e in epochs], label="val")
    a.set_xlabel("epoch")
    a.set_ylabel("loss")
    a.legend()
    keys = sorted(k for k in (epochs[0] if epochs else {}) if k.startswith("val_iou"))
    for k in keys:
        b.plot([e[k] for e in epochs], label=k.replace("val_iou_", "level "))
    b.set_xlabel("epoch")
    b.set_ylabel("val IoU")
    if keys:
        b.legend()
    fig.tight_layout()
    p = out / "loss_curves.png"
    fig.savefig(p, dpi=80)
    plt.close(fig)
    return p


def plot_pyramid_json(pyramid_path, out_dir) -> list[Path]:
    docs = json.loads(Path(pyramid_path).read_text())
    return save_projections([grid_from_json(d) for d in docs], out_dir, [d["level"] for d in docs])
