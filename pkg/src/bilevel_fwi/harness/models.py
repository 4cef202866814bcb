"""Model files, slicing, a layered Marmousi-like generator and starting models.

Text model format::

    # n1 n2 width_x width_z
    <M values, one per line, node order k = i * n2 + j>

Values are squared slowness in s^2/km^2.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..grid_fem import Grid, build_grid


def save_model(path, grid: Grid, m) -> None:
    m = np.asarray(m, dtype=float)
    if m.shape != (grid.M,):
        raise ValueError("model length does not match the grid")
    header = f"{grid.n1} {grid.n2} {grid.width_x!r} {grid.width_z!r}"
    np.savetxt(path, m, header=header, fmt="%.17g")


def load_model(path) -> tuple[Grid, np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        first = fh.readline()
    if not first.startswith("#"):
        raise ValueError(f"{path}: missing '# n1 n2 width_x width_z' header")
    n1, n2, wx, wz = first[1:].split()
    grid = build_grid(int(n1), int(n2), float(wx), float(wz))
    m = np.loadtxt(path, ndmin=1)
    if m.shape != (grid.M,):
        raise ValueError(f"{path}: expected {grid.M} values, found {m.size}")
    return grid, m


def slice_model(grid: Grid, m, n_slices: int) -> tuple[Grid, list[np.ndarray]]:
    """Split horizontally into ``n_slices`` pieces of ``n1 / n_slices`` node columns."""
    if n_slices < 1 or grid.n1 % n_slices:
        raise ValueError(f"{grid.n1} node columns cannot be split into {n_slices} equal slices")
    w = grid.n1 // n_slices
    if w < 2:
        raise ValueError("slices need at least two node columns")
    cols = np.asarray(m, dtype=float).reshape(grid.shape)
    sub = build_grid(w, grid.n2, (w - 1) * grid.hx, grid.width_z)
    return sub, [cols[k * w:(k + 1) * w].reshape(-1).copy() for k in range(n_slices)]


def load_and_slice(path, n_slices: int) -> tuple[Grid, list[np.ndarray]]:
    grid, m = load_model(path)
    return slice_model(grid, m, n_slices)


def velocity_to_model(c) -> np.ndarray:
    return 1.0 / np.asarray(c, dtype=float) ** 2


def model_to_velocity(m) -> np.ndarray:
    return 1.0 / np.sqrt(np.asarray(m, dtype=float))


def smooth(grid: Grid, m, cells: float = 3.0) -> np.ndarray:
    """Gaussian filter applied horizontally and vertically, width in grid cells."""
    if cells <= 0:
        return np.asarray(m, dtype=float).copy()
    img = np.asarray(m, dtype=float).reshape(grid.shape)
    return gaussian_filter(img, sigma=cells, mode="nearest").reshape(-1)


def layered_model(grid: Grid, seed=0, c_top=1.5, c_bottom=4.5, n_layers=9, smooth_cells=3.0) -> np.ndarray:
    """Gently folded layered velocity with a fault and a lens, as squared slowness.

    A stand-in for Marmousi: velocity increases with depth through
    ``n_layers`` interfaces that undulate laterally, a normal fault offsets the
    layers, and a low-velocity lens sits mid-depth.
    """
    rng = np.random.default_rng(seed)
    x = grid.x / grid.width_x
    z = grid.z / grid.width_z
    depths = np.sort(rng.uniform(0.05, 0.95, n_layers))
    speeds = np.sort(rng.uniform(c_top, c_bottom, n_layers + 1))
    speeds[0], speeds[-1] = c_top, c_bottom
    fx = rng.uniform(0.3, 0.7)
    throw = rng.uniform(0.04, 0.1)
    c = np.full(grid.M, speeds[0])
    for k, d0 in enumerate(depths):
        amp = rng.uniform(0.01, 0.05)
        wav = rng.uniform(1.0, 4.0)
        ph = rng.uniform(0, 2 * np.pi)
        tilt = rng.uniform(-0.08, 0.08)
        iface = d0 + amp * np.sin(2 * np.pi * wav * x + ph) + tilt * (x - 0.5)
        iface = iface + np.where(x > fx + 0.3 * (z - 0.5), throw, 0.0)
        c = np.where(z >= iface, speeds[k + 1], c)
    lx, lz = rng.uniform(0.2, 0.8), rng.uniform(0.35, 0.65)
    lens = ((x - lx) / 0.12) ** 2 + ((z - lz) / 0.05) ** 2 < 1.0
    c = np.where(lens, 0.85 * c, c)
    return smooth(grid, velocity_to_model(c), smooth_cells)


def marmousi_like(n1=220, n2=61, width_x=None, width_z=3.0, seed=0, smooth_cells=3.0) -> tuple[Grid, np.ndarray]:
    """Full-width synthetic section with Marmousi's aspect (11 km x 3 km by default)."""
    if width_x is None:
        width_x = 11.0 * (n1 - 1) / n1 if n1 % 5 == 0 else 11.0
    grid = build_grid(n1, n2, width_x, width_z)
    return grid, layered_model(grid, seed=seed, smooth_cells=smooth_cells)


def initial_model(grid: Grid, c_top=1.5, c_bottom=4.0) -> np.ndarray:
    """``1/c^2`` with ``c`` linear in depth and horizontally constant."""
    c = c_top + (c_bottom - c_top) * grid.z / grid.width_z
    return velocity_to_model(c)
