"""Matplotlib figures written next to the CSV outputs of the command line."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
}

CONDITION_COLORS = {"clean": "#4c72b0", "random": "#8c8c8c", "edpa": "#c44e52"}


def figsize(scale: float = 1.0, ratio: float = 0.62) -> tuple[float, float]:
    width = 5.0 * scale
    return width, width * ratio


def new_figure(scale: float = 1.0, ratio: float = 0.62):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(scale, ratio))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_conditions(records: Sequence, path, title: str = "") -> Path:
    """Bar chart of failure rate per condition, with per-seed points when given."""
    fig, ax = new_figure(0.8)
    names = [r.condition for r in records]
    rates = [100 * r.failure_rate for r in records]
    ax.bar(names, rates, color=[CONDITION_COLORS.get(n, "#55a868") for n in names])
    for i, v in enumerate(rates):
        ax.text(i, v + 1, f"{v:.1f}", ha="center", va="bottom")
    ax.set_ylabel("failure rate (%)")
    ax.set_ylim(0, 105)
    if title:
        ax.set_title(title)
    return save(fig, path)


def plot_ablation(xs: Sequence[float], records: Sequence, path, xlabel: str, baseline: float | None = None) -> Path:
    fig, ax = new_figure()
    ax.plot(xs, [100 * r.failure_rate for r in records], marker="o", color=CONDITION_COLORS["edpa"], label="EDPA")
    if baseline is not None:
        ax.axhline(100 * baseline, ls="--", color=CONDITION_COLORS["random"], label="random patch")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("failure rate (%)")
    ax.legend(frameon=False)
    return save(fig, path)


def plot_curve(rows: Sequence[dict], keys: Sequence[str], path, xkey: str = "iteration") -> Path:
    """One panel per key of a JSON-lines training log."""
    keys = [k for k in keys if any(r.get(k) is not None for r in rows)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(keys), 1, sharex=True, figsize=figsize(1.0, 0.35 * max(len(keys), 1)), squeeze=False)
    for ax, key in zip(axes[:, 0], keys):
        pts = [(r[xkey], r[key]) for r in rows if r.get(key) is not None]
        ax.plot(*zip(*pts), lw=0.8)
        ax.set_ylabel(key)
    axes[-1, 0].set_xlabel(xkey)
    return save(fig, path)


def plot_heatmap(matrix: np.ndarray, path, token_labels: Sequence[str] | None = None, covered: Sequence[int] | None = None) -> Path:
    """Patch-by-token cosine matrix; rows under the patch are outlined."""
    fig, ax = new_figure(0.8, 1.0)
    im = ax.imshow(matrix, cmap="RdBu_r", vmin=-1, vmax=1, aspect="auto")
    fig.colorbar(im, ax=ax, label="cos(p_i, w_j)")
    ax.set_xlabel("instruction token")
    ax.set_ylabel("image block")
    if token_labels is not None:
        ax.set_xticks(range(len(token_labels)), token_labels, rotation=45, ha="right")
    for i in covered if covered is not None else ():
        ax.add_patch(plt.Rectangle((-0.5, i - 0.5), matrix.shape[1], 1, fill=False, ec="k", lw=1.2))
    return save(fig, path)


def plot_patch(pixels: np.ndarray, path) -> Path:
    fig, ax = new_figure(0.5, 1.0)
    ax.imshow(np.clip(pixels, 0, 1), interpolation="nearest")
    ax.set_axis_off()
    return save(fig, path)
