"""Figures written next to the delimited CLI outputs (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_curves(curve: Sequence[dict], path: str | Path) -> Path:
    """Loss terms and MAE per epoch."""
    epochs = [r["epoch"] for r in curve]
    fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("l_total", "l_count"):
        ax_l.plot(epochs, [r[key] for r in curve], label=key)
    ax_l.set_yscale("log")
    ax_l.set_xlabel("epoch")
    ax_l.legend()
    ax_m.plot(epochs, [r["train_mae"] for r in curve], label="train MAE")
    val = [(r["epoch"], r["val_mae"]) for r in curve if r.get("val_mae") is not None]
    if val:
        ax_m.plot(*zip(*val), label="val MAE")
    ax_m.set_xlabel("epoch")
    ax_m.legend()
    return _save(fig, path)


def plot_maps(image: np.ndarray, maps: dict[str, np.ndarray], path: str | Path, title: str = "") -> Path:
    """Input image followed by one panel per named map."""
    fig, axes = plt.subplots(1, len(maps) + 1, figsize=(3 * (len(maps) + 1), 3))
    axes[0].imshow(np.clip(np.transpose(image, (1, 2, 0)), 0, 1))
    axes[0].set_title(title or "image")
    for ax, (name, m) in zip(axes[1:], maps.items()):
        im = ax.imshow(np.asarray(m), cmap="viridis")
        ax.set_title(name)
        fig.colorbar(im, ax=ax, fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def plot_ablation(names: Sequence[str], maes: dict[str, Sequence[float]], path: str | Path) -> Path:
    """Grouped MAE bars, one group per ablation row and one bar per evaluation set."""
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3.5))
    width = 0.8 / max(1, len(maes))
    x = np.arange(len(names))
    for i, (label, values) in enumerate(maes.items()):
        ax.bar(x + i * width, values, width, label=label)
    ax.set_xticks(x + width * (len(maes) - 1) / 2)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("MAE")
    ax.legend()
    return _save(fig, path)


def plot_lat_histograms(stats: Sequence, path: str | Path) -> Path:
    """Histogram of each LAT matrix from its exported 32-bin summary."""
    fig, axes = plt.subplots(1, len(stats), figsize=(4 * len(stats), 3))
    axes = np.atleast_1d(axes)
    for ax, s in zip(axes, stats):
        ax.stairs(s.bins, s.edges, fill=True)
        ax.set_title(f"{s.matrix}  mean={s.mean:.3f}")
    return _save(fig, path)
