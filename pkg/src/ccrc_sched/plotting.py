"""Matplotlib figure builders with deterministic SVG output.

Every figure saved through ``save_svg`` renders byte-identically for the
same inputs: the SVG hash salt is pinned and the date metadata is dropped.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import rc_context  # noqa: E402
from matplotlib.colors import BoundaryNorm, ListedColormap  # noqa: E402

_SVG_RC = {"svg.hashsalt": "ccrc-sched", "svg.fonttype": "path"}

# level 1 (best) .. level 4 stable, level 5 unstable
LEVEL_COLORS = ("#1a9850", "#91cf60", "#d9ef8b", "#fee08b", "#d73027")


def save_svg(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def level_heatmap(levels: np.ndarray, row_labels: Sequence[str],
                  col_labels: Sequence[str], title: str):
    """Discrete 5-level stability map."""
    fig, ax = plt.subplots(
        figsize=(max(4.0, 0.30 * len(col_labels) + 2.0),
                 max(3.0, 0.16 * len(row_labels) + 1.5)))
    cmap = ListedColormap(LEVEL_COLORS)
    norm = BoundaryNorm(np.arange(0.5, 6.5), cmap.N)
    im = ax.imshow(levels, cmap=cmap, norm=norm, aspect="auto",
                   interpolation="nearest")
    ax.set_xticks(range(len(col_labels)))
    ax.set_xticklabels(col_labels, fontsize=6, rotation=90)
    ax.set_yticks(range(len(row_labels)))
    ax.set_yticklabels(row_labels, fontsize=6)
    ax.set_xlabel("operating subregion")
    ax.set_ylabel("configuration")
    ax.set_title(title)
    cbar = fig.colorbar(im, ax=ax, ticks=range(1, 6))
    cbar.set_label("performance level")
    fig.tight_layout()
    return fig


def membership_matrix(groups: Mapping[tuple, Sequence[int]],
                      indicator_names: Sequence[str], title: str):
    """UpSet-style view: group sizes on top, cluster membership below."""
    keys = sorted(groups, key=lambda k: (-len(groups[k]), k))
    sizes = [len(groups[k]) for k in keys]
    n_ind = len(indicator_names)
    fig, (ax_bar, ax_mat) = plt.subplots(
        2, 1, sharex=True, figsize=(max(4.0, 0.6 * len(keys) + 1.5), 4.5),
        gridspec_kw={"height_ratios": [1.2, 1.0]})
    ax_bar.bar(range(len(keys)), sizes, color="#4575b4")
    ax_bar.set_ylabel("group size")
    ax_bar.set_title(title)
    for x, s in enumerate(sizes):
        ax_bar.text(x, s, str(s), ha="center", va="bottom", fontsize=7)
    for x, key in enumerate(keys):
        for yrow, cluster in enumerate(key):
            if cluster:
                ax_mat.scatter([x], [yrow], s=70, color="#313695")
                ax_mat.annotate(str(cluster), (x, yrow),
                                textcoords="offset points", xytext=(6, -3),
                                fontsize=7)
            else:
                ax_mat.scatter([x], [yrow], s=25, facecolors="none",
                               edgecolors="#bbbbbb")
    ax_mat.set_yticks(range(n_ind))
    ax_mat.set_yticklabels(indicator_names, fontsize=8)
    ax_mat.set_ylim(-0.5, n_ind - 0.5)
    ax_mat.invert_yaxis()
    ax_mat.set_xticks(range(len(keys)))
    ax_mat.set_xticklabels([f"G{i + 1}" for i in range(len(keys))], fontsize=7)
    ax_mat.set_xlabel("combined-attribute group")
    fig.tight_layout()
    return fig


def series_plot(x: np.ndarray, series: Mapping[str, np.ndarray],
                xlabel: str, ylabel: str, title: str):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for name, y in series.items():
        ax.plot(x, y, label=name, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def box_summary_plot(stats: Mapping[str, Mapping[str, Sequence[float]]],
                     title: str):
    """Five-number comparisons per indicator; one axes per indicator."""
    names = list(stats)
    fig, axes = plt.subplots(1, len(names),
                             figsize=(2.2 * len(names) + 1.0, 3.2))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        data = stats[name]
        ax.boxplot([data[k] for k in data], tick_labels=list(data),
                   whis=(0, 100))
        ax.set_title(name, fontsize=9)
        ax.tick_params(axis="x", labelsize=7, rotation=20)
    fig.suptitle(title)
    fig.tight_layout()
    return fig


def bar_groups(categories: Sequence[str],
               series: Mapping[str, Sequence[float]],
               ylabel: str, title: str):
    """Grouped bars; one bar per category within each named series."""
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    x = np.arange(len(categories), dtype=float)
    width = 0.8 / max(len(series), 1)
    for i, (name, vals) in enumerate(series.items()):
        ax.bar(x + (i - (len(series) - 1) / 2) * width, vals, width,
               label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(categories, fontsize=8, rotation=15)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def step_grid(x: np.ndarray, panels: Mapping[str, Mapping[str, np.ndarray]],
              xlabel: str, ylabel: str, *,
              yticks: Sequence[float] | None = None,
              yticklabels: Sequence[str] | None = None, title: str = ""):
    """Stacked step-trace panels sharing the x axis, one per panel key."""
    names = list(panels)
    fig, axes = plt.subplots(len(names), 1, sharex=True,
                             figsize=(6.4, 1.1 * len(names) + 1.2))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        for label, y in panels[name].items():
            ax.step(x, y, where="post", label=label, linewidth=1.1)
        ax.set_ylabel(name, fontsize=8)
        if yticks is not None:
            ax.set_yticks(yticks)
            if yticklabels is not None:
                ax.set_yticklabels(yticklabels, fontsize=6)
        ax.grid(True, alpha=0.25)
    axes[-1].set_xlabel(xlabel)
    axes[0].legend(fontsize=6, ncol=len(panels[names[0]]), loc="upper right")
    fig.suptitle(title or ylabel)
    fig.tight_layout()
    return fig


def scatter_groups(groups: Mapping[str, tuple[np.ndarray, np.ndarray]],
                   xlabel: str, ylabel: str, title: str):
    """One scatter cloud per named group on shared axes."""
    fig, ax = plt.subplots(figsize=(5.4, 3.6))
    for name, (x, y) in groups.items():
        ax.scatter(x, y, s=14, alpha=0.7, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(groups) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig
