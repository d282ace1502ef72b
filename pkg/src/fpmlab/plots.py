"""Figure rendering for experiment outputs.

Figures are derived views of the metrics CSV, rendered with matplotlib
and saved as SVG next to the CSV.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def line_plot(series, path, title: str, xlabel: str, ylabel: str,
              ylim=None) -> None:
    """series: list of (label, xs, ys). One line per entry."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, xs, ys in series:
        ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.4, label=label)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if ylim is not None:
        ax.set_ylim(*ylim)
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def bar_plot(labels, groups, path, title: str, ylabel: str) -> None:
    """groups: list of (group_label, values aligned with labels)."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(groups))
    for i, (glabel, values) in enumerate(groups):
        ax.bar(x + (i - (len(groups) - 1) / 2) * width, values, width,
               label=glabel)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.05)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def heatmap(matrix, row_labels, col_labels, path, title: str,
            xlabel: str, ylabel: str) -> None:
    matrix = np.asarray(matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(5.6, 4.6))
    im = ax.imshow(matrix, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(col_labels)), col_labels)
    ax.set_yticks(range(len(row_labels)), row_labels)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    color="white" if matrix[i, j] < 0.6 else "black",
                    fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
