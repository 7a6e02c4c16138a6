"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_heatmap(matrix: np.ndarray, path, title: str = "") -> None:
    """Attention heatmap with a linear color scale anchored at 0."""
    m = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(m, cmap="viridis", vmin=0.0, vmax=max(float(m.max()), 1e-12), interpolation="nearest")
    ax.set_xlabel("key frame")
    ax.set_ylabel("query frame")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(series: dict[str, list[float]], path, ylabel: str = "loss", logy: bool = True) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, ys in series.items():
        ax.plot(np.arange(len(ys)), ys, label=name, lw=1)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_contact_sheet(rows: dict[str, np.ndarray], path) -> None:
    """One row of frames per named video (frames ``(F, H, W, 3)``)."""
    names = list(rows)
    cols = max(len(rows[n]) for n in names)
    fig, axes = plt.subplots(len(names), cols, figsize=(1.1 * cols, 1.2 * len(names)), squeeze=False)
    for r, name in enumerate(names):
        for c in range(cols):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c < len(rows[name]):
                ax.imshow(np.clip(rows[name][c], 0, 1), interpolation="nearest")
            else:
                ax.axis("off")
        axes[r, 0].set_ylabel(name, fontsize=7)
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=120)
    plt.close(fig)
