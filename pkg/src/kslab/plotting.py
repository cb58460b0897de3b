"""PNG figures for reports (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_series(path, t, series: dict, bounds: dict | None = None, logy=False, xlabel="t", ylabel="", title=""):
    """Line plot of named series with optional dashed bound curves or constants."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, y in series.items():
        ax.plot(t, y, label=name)
    for name, y in (bounds or {}).items():
        if np.ndim(y) == 0:
            ax.axhline(float(y), ls="--", lw=1, color="k", alpha=0.6, label=name)
        else:
            ax.plot(t, y, ls="--", lw=1, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_profiles(path, x, profiles, times, max_lines=8, title=""):
    """Snapshots of a 1D density at a few stored times."""
    fig, ax = plt.subplots(figsize=(6, 4))
    idx = np.unique(np.linspace(0, len(times) - 1, min(max_lines, len(times))).astype(int))
    cmap = plt.get_cmap("viridis")
    for j, i in enumerate(idx):
        ax.plot(x, profiles[i], color=cmap(j / max(1, len(idx) - 1)), label=f"t={times[i]:.3g}")
    ax.set_xlabel("x")
    ax.set_ylabel("u")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_field2d(path, grid, values, title=""):
    fig, ax = plt.subplots(figsize=(5, 4))
    ext = [-grid.L, grid.L - grid.h] * 2
    im = ax.imshow(values.T, origin="lower", extent=ext, cmap="viridis")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_state(path, grid, values, title=""):
    if grid.dim == 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(grid.axis, values)
        ax.set_xlabel("x")
        if title:
            ax.set_title(title)
        return _save(fig, path)
    return plot_field2d(path, grid, values, title)
