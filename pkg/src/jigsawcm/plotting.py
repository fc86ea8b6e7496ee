"""PNG figures for reports: distance maps, training curves, masking and scaling plots."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_heatmap(matrix: np.ndarray, path: str | Path, cmap: str = "viridis") -> None:
    """One pixel per entry, no axes; brighter = more compatible."""
    plt.imsave(str(path), np.asarray(matrix, dtype=np.float64), cmap=cmap, format="png")


def _finish(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(str(path), dpi=100, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_training(records: Sequence[dict], path: str | Path) -> None:
    """Mean loss and validation Top-1 per epoch."""
    epochs = [r["epoch"] for r in records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r["mean_loss"] for r in records], marker="o")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss")
    for key, label in (("val_top1_type1", "Type-1"), ("val_top1_type2", "Type-2")):
        vals = [r.get(key) for r in records]
        if any(v is not None for v in vals):
            ax_acc.plot(epochs, [np.nan if v is None else v for v in vals], marker="o", label=label)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation Top-1")
    if ax_acc.lines:
        ax_acc.legend()
    _finish(fig, path)


def plot_masking(curves: dict[str, Sequence[dict]], path: str | Path) -> None:
    """Top-1 retention against the fraction of masked embedding components."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, rows in curves.items():
        ax.plot([r["fraction"] for r in rows], [r["retention"] for r in rows], marker="o", label=label)
    ax.set_xlabel("masked fraction")
    ax.set_ylabel("Top-1 retention")
    ax.legend()
    _finish(fig, path)


def plot_scaling(rows: Sequence[dict], path: str | Path) -> None:
    """Log-log wall-clock time against puzzle size, one line per backend."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for backend in sorted({r["backend"] for r in rows}):
        pts = sorted((r["N"], r["wall_secs"]) for r in rows if r["backend"] == backend)
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker="o", label=backend)
    ax.set_xlabel("pieces N")
    ax.set_ylabel("wall-clock seconds")
    ax.legend()
    _finish(fig, path)
