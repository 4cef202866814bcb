"""Figure rendering for reports; matplotlib is imported only when a plot is drawn."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def model_image(path, grid, values, title="", sensors=None, sources=None, cmap="viridis", label=""):
    """Nodal field as an image (x to the right, depth downwards)."""
    plt = _pyplot()
    img = grid.as_image(values).T  # rows are depth
    fig, ax = plt.subplots(figsize=(4, 4 * grid.width_z / max(grid.width_x, 1e-12) + 0.8))
    im = ax.imshow(img, extent=(0, grid.width_x, grid.width_z, 0), cmap=cmap, aspect="equal")
    fig.colorbar(im, ax=ax, label=label, shrink=0.8)
    if sources is not None:
        s = np.atleast_2d(sources)
        ax.plot(s[:, 0], s[:, 1], "o", color="limegreen", ms=5)
    if sensors is not None:
        p = np.atleast_2d(sensors)
        ax.plot(p[:, 0], p[:, 1], "o", color="red", ms=5)
    ax.set_xlabel("x (km)")
    ax.set_ylabel("z (km)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def curves(path, series: dict, xlabel="", ylabel="", title="", logy=False, markers=None):
    """Line plot of ``{label: (x, y)}``; ``markers`` is ``{label: (x, y)}`` of points."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for name, (x, y) in series.items():
        ax.plot(x, y, label=name)
    for name, (x, y) in (markers or {}).items():
        ax.plot(np.atleast_1d(x), np.atleast_1d(y), "o", label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def safe(fn, *args, **kwargs):
    """Render a figure, logging rather than raising if plotting is unavailable."""
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - figures are optional output
        log.warning("figure %s not written: %s", args[0] if args else "?", exc)
        return None
