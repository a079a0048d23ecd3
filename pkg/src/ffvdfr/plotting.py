"""File-only figures: coefficient-surface heat maps and simulation summaries.

Figures are built on an explicit Agg canvas, so nothing touches pyplot's
global state and no display is needed.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib as mpl
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.cmap": "viridis",
    "savefig.dpi": 150,
}
COLORS = {"ffvdfr": "#1f77b4", "sof": "#d62728"}
# no timestamps or version strings in the PNG, so reruns are byte-identical
_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, metadata=_PNG_META if path.suffix.lower() == ".png" else None)
    return path


def surface_heatmap(t_grid, T_grid, surface, path, title: str = r"$\hat\beta(t, T)$") -> Path:
    """Heat map of a masked surface of shape ``(len(T_grid), len(t_grid))``."""
    t_grid, T_grid = np.asarray(t_grid, float), np.asarray(T_grid, float)
    z = np.ma.masked_invalid(np.asarray(surface, float))
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(4.6, 3.6), layout="constrained")
        ax = fig.add_subplot()
        if T_grid.size > 1 and t_grid.size > 1:
            mesh = ax.pcolormesh(t_grid, T_grid, z, shading="nearest")
            fig.colorbar(mesh, ax=ax, label=r"$\beta$")
            ax.set_ylabel("T (domain length)")
        else:
            ax.plot(t_grid, z.ravel(), color=COLORS["ffvdfr"])
            ax.set_ylabel(r"$\beta$")
        ax.set_xlabel("t")
        ax.set_title(title)
        return _save(fig, path)


def scenario_boxplots(results: dict, path, metric: str = "rmse") -> Path:
    """Box plots per scenario.

    ``results`` maps scenario id to a dict of method -> list of values,
    e.g. ``{"N100-...": {"ffvdfr": [...], "sof": [...]}}``.
    """
    labels = list(results)
    methods = sorted({m for r in results.values() for m in r}, key=lambda m: m != "ffvdfr")
    with mpl.rc_context(STYLE):
        width = max(4.0, 0.9 * len(labels) * max(len(methods), 1) + 1.5)
        fig = Figure(figsize=(width, 3.4), layout="constrained")
        ax = fig.add_subplot()
        step = len(methods) + 1
        finite = []
        for j, m in enumerate(methods):
            data = [np.asarray(results[s].get(m, []), float) for s in labels]
            data = [d[np.isfinite(d)] for d in data]
            pos = [i * step + j for i in range(len(labels))]
            keep = [k for k, d in enumerate(data) if d.size]
            if not keep:
                continue
            bp = ax.boxplot([data[k] for k in keep], positions=[pos[k] for k in keep],
                            widths=0.7, patch_artist=True, manage_ticks=False)
            for box in bp["boxes"]:
                box.set_facecolor(COLORS.get(m, "0.6"))
                box.set_alpha(0.6)
            for k in keep:
                ax.plot(np.full(data[k].size, pos[k]), data[k], ".", ms=3,
                        color=COLORS.get(m, "0.4"))
            finite.extend(data[k] for k in keep)
            ax.plot([], [], "s", color=COLORS.get(m, "0.6"), label=m.upper())
        ax.set_xticks([i * step + (len(methods) - 1) / 2 for i in range(len(labels))])
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel(metric.upper())
        vals = np.concatenate(finite) if finite else np.empty(0)
        vals = vals[vals > 0]
        if vals.size and vals.max() / vals.min() > 20:
            ax.set_yscale("log")
        if methods:
            ax.legend(frameon=False)
        return _save(fig, path)
