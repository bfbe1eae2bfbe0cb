"""Static figure rendering for experiment artifacts.

Every function writes a PNG to a caller-chosen path and returns that path.
Rendering is read-only over the artifact data; figures are a visual
companion to the CSV outputs, never a data source.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")  # file-only backend; no display required

import matplotlib.pyplot as plt
import numpy as np

_CLASS_COLORS = ("tab:blue", "tab:red")


def _scatter_classes(ax, x, y, size=4, alpha=0.5):
    for label in (0, 1):
        mask = y == label
        ax.scatter(x[mask, 0], x[mask, 1], s=size, alpha=alpha,
                   color=_CLASS_COLORS[label], label=f"class {label}",
                   linewidths=0)


def save_data_figure(path, split) -> str:
    """Training inputs: unlabeled pool in gray, labeled points highlighted."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(split.unlabeled_x[:, 0], split.unlabeled_x[:, 1], s=3,
               color="0.75", alpha=0.4, label="unlabeled", linewidths=0)
    for label in (0, 1):
        mask = split.labeled_y == label
        ax.scatter(split.labeled_x[mask, 0], split.labeled_x[mask, 1], s=90,
                   marker="*", color=_CLASS_COLORS[label], edgecolors="black",
                   linewidths=0.5, label=f"labeled {label}", zorder=3)
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_contour_figure(path, grid_rows, title, labeled=None) -> str:
    """p(class 1) over the grid; a second panel shows the across-chain
    standard deviation when the rows carry one."""
    rows = np.asarray(grid_rows, dtype=np.float64)
    x1 = np.unique(rows[:, 0])
    x2 = np.unique(rows[:, 1])
    shape = (x2.size, x1.size)
    panels = 2 if rows.shape[1] == 4 else 1
    fig, axes = plt.subplots(1, panels, figsize=(5 * panels, 4), squeeze=False)
    names = ("p(class 1)", "std across chains")
    for k in range(panels):
        ax = axes[0, k]
        field = rows[:, 2 + k].reshape(shape)
        contour = ax.contourf(x1, x2, field, levels=20, cmap="RdBu_r")
        fig.colorbar(contour, ax=ax)
        if labeled is not None:
            x, y = labeled
            for label in (0, 1):
                mask = y == label
                ax.scatter(x[mask, 0], x[mask, 1], s=60, marker="*",
                           color=_CLASS_COLORS[label], edgecolors="black",
                           linewidths=0.5)
        ax.set_title(f"{title}: {names[k]}", fontsize=10)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_samples_figure(path, sample_x, sample_y, train_x, title) -> str:
    """Generated points over a faint backdrop of the training inputs."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(train_x[:, 0], train_x[:, 1], s=3, color="0.8", alpha=0.3,
               label="training data", linewidths=0)
    _scatter_classes(ax, np.asarray(sample_x), np.asarray(sample_y), size=6,
                     alpha=0.7)
    ax.set_title(title, fontsize=10)
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_training_figure(path, totals_by_method) -> str:
    """Objective trajectories, one line per method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, series in totals_by_method.items():
        steps, totals = series
        ax.plot(steps, totals, label=method, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("objective")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
