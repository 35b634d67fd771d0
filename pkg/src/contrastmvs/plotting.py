"""File-only figures for the CLI reports (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["STYLE", "save_loss_curves", "save_ablation_chart", "colorize_depth", "save_depth_png"]

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.linewidth": 0.8,
    "figure.dpi": 110,
}

PALETTE = ["#0C5DA5", "#00A08A", "#F2AD00", "#B40F20"]


def _finish(ax):
    for spine in ("top", "right"):
        ax.spines[spine].set_visible(False)
    ax.grid(alpha=0.25, linewidth=0.5, linestyle="--")


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_loss_curves(path: str | Path, rows: Sequence[Sequence[float]],
                     window: int = 25) -> Path:
    """Trailing mean (over up to ``window`` steps) of each logged loss term."""
    data = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    k = max(1, window)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for col, (name, color) in enumerate(zip(("l1", "cml", "wfl", "total"), PALETTE), 1):
            csum = np.concatenate([[0.0], np.cumsum(data[:, col])])
            end = np.arange(1, len(data) + 1)
            start = np.maximum(0, end - k)
            smooth = (csum[end] - csum[start]) / (end - start)
            ax.plot(data[:, 0], smooth, color=color, lw=1.2, label=name,
                    marker="o" if len(data) == 1 else None)
        ax.set_xlabel("step")
        ax.set_ylabel(f"loss (trailing mean, {k} steps)")
        ax.legend(frameon=False, ncol=4)
        _finish(ax)
        return _save(fig, path)


def save_ablation_chart(path: str | Path, table: Sequence[dict]) -> Path:
    """Grouped bars of epe / e1 / e3 per ablation row."""
    labels = [f"({r['row']}) {r['losses']}" for r in table]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(8.0, 2.8))
        x = np.arange(len(table))
        for ax, key in zip(axes, ("epe", "e1", "e3")):
            vals = [float(r[key]) for r in table]
            ax.bar(x, vals, color=PALETTE[: len(vals)], width=0.65)
            ax.set_xticks(x)
            ax.set_xticklabels(labels, rotation=30, ha="right")
            ax.set_title(key)
            _finish(ax)
        return _save(fig, path)


def colorize_depth(depth: np.ndarray, lo: float, hi: float, cmap: str = "viridis") -> np.ndarray:
    """[H,W] depth to [3,H,W] RGB in [0,1]; non-positive depths are black."""
    depth = np.asarray(depth, dtype=np.float64)
    t = np.clip((depth - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    rgb = matplotlib.colormaps[cmap](t)[..., :3]
    rgb[~(depth > 0)] = 0.0
    return rgb.transpose(2, 0, 1)


def save_depth_png(path: str | Path, depth: np.ndarray, lo: float, hi: float) -> Path:
    from .scenes import write_png

    write_png(path, colorize_depth(depth, lo, hi))
    return Path(path)
