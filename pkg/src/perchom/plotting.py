"""Deterministic SVG figures.

matplotlib with the Agg backend; the SVG id salt is fixed and the date
metadata dropped, so the same data gives the same bytes.
"""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "svg.hashsalt": "perchom",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 100,
}

__all__ = ["line_plot", "heatmap", "level_sets"]


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def line_plot(
    path,
    series: Sequence[tuple],
    xlabel: str = "",
    ylabel: str = "",
    title: str = "",
    logx: bool = False,
    logy: bool = False,
) -> None:
    """Line plot of ``(label, x, y)`` series with markers."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for label, x, y in series:
            ax.plot(np.asarray(x, float), np.asarray(y, float), marker="o", ms=3, lw=1.2, label=label)
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if any(lbl for lbl, _, _ in series):
            ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def heatmap(
    path,
    values: np.ndarray,
    origin: Sequence[int],
    title: str = "",
    cmap: str = "viridis",
    mask: Optional[np.ndarray] = None,
    symmetric: bool = False,
    label: str = "",
) -> None:
    """Heat map of a 2d lattice field; masked vertices are left blank."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("heat maps need a 2d field")
    data = np.ma.masked_array(values.T, mask=None if mask is None else ~np.asarray(mask).T)
    x0, y0 = origin
    nx, ny = values.shape
    extent = (x0 - 0.5, x0 + nx - 0.5, y0 - 0.5, y0 + ny - 0.5)
    kw = {}
    if symmetric:
        lim = float(np.abs(values if mask is None else values[mask]).max()) or 1.0
        kw = {"vmin": -lim, "vmax": lim}
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        im = ax.imshow(data, origin="lower", extent=extent, cmap=cmap, interpolation="nearest", **kw)
        fig.colorbar(im, ax=ax, label=label)
        ax.set_aspect("equal")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def level_sets(path, fields: Sequence[tuple], origin: Sequence[int], n_levels: int = 8, title: str = "") -> None:
    """Side-by-side contour plots of ``(label, field)`` pairs."""
    n = len(fields)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
        for ax, (label, f) in zip(axes[0], fields):
            f = np.asarray(f, dtype=float)
            xs = origin[0] + np.arange(f.shape[0])
            ys = origin[1] + np.arange(f.shape[1])
            ax.contour(xs, ys, f.T, levels=n_levels, linewidths=0.7)
            ax.set_aspect("equal")
            ax.set_title(label)
            ax.tick_params(labelsize=6)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        _save(fig, path)
