"""PNG figure helpers. Output is byte-deterministic (no timestamps or version tags)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def heatmap(
    values: np.ndarray,
    path,
    *,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    xticklabels: Optional[Sequence] = None,
    yticklabels: Optional[Sequence] = None,
    cmap: str = "viridis",
    vmin: Optional[float] = None,
    vmax: Optional[float] = None,
    annotate: bool = False,
) -> Path:
    v = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * v.shape[1] + 2), max(3, 0.35 * v.shape[0] + 1.5)))
    im = ax.imshow(v, cmap=cmap, vmin=vmin, vmax=vmax, aspect="auto")
    fig.colorbar(im, ax=ax)
    if xticklabels is not None:
        ax.set_xticks(range(len(xticklabels)), [str(x) for x in xticklabels], rotation=45, ha="right")
    if yticklabels is not None:
        ax.set_yticks(range(len(yticklabels)), [str(y) for y in yticklabels])
    if annotate:
        for (i, j), x in np.ndenumerate(v):
            ax.text(j, i, f"{x:.2f}", ha="center", va="center", fontsize=7, color="w")
    ax.set(title=title, xlabel=xlabel, ylabel=ylabel)
    fig.tight_layout()
    return _save(fig, path)


def line_plot(
    series: Mapping[str, tuple[Sequence, Sequence]], path, *, title: str = "", xlabel: str = "", ylabel: str = ""
) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, (x, y) in series.items():
        ax.plot(list(x), list(y), marker="o", ms=3, label=label)
    ax.set(title=title, xlabel=xlabel, ylabel=ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def scatter_panels(
    panels: Mapping[str, np.ndarray], labels: Sequence, path, *, title: str = ""
) -> Path:
    """One 2-D scatter per panel, points coloured by ``labels``."""
    names = list(panels)
    cats = sorted(set(labels), key=str)
    cmap = plt.get_cmap("tab20")
    fig, axes = plt.subplots(1, len(names), figsize=(3 * len(names) + 1, 3), squeeze=False)
    lab = np.asarray([str(x) for x in labels])
    for ax, name in zip(axes[0], names):
        xy = np.asarray(panels[name])
        for i, c in enumerate(cats):
            m = lab == str(c)
            ax.scatter(xy[m, 0], xy[m, 1], s=8, color=cmap(i % 20), label=str(c))
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0][-1].legend(fontsize=6, loc="center left", bbox_to_anchor=(1, 0.5))
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def stacked_bars(matrix: np.ndarray, path, *, row_labels: Sequence, title: str = "") -> Path:
    """Rows are positions, columns ranks; bars stack position mass per rank."""
    m = np.asarray(matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bottom = np.zeros(m.shape[1])
    x = np.arange(1, m.shape[1] + 1)
    for i, lab in enumerate(row_labels):
        ax.bar(x, m[i], bottom=bottom, label=str(lab))
        bottom += m[i]
    ax.set(title=title, xlabel="rank", ylabel="proportion", xticks=x)
    ax.legend(fontsize=7, title="position")
    fig.tight_layout()
    return _save(fig, path)
