"""Sliding bicubic evaluation of nodal fields at sensor positions.

Each sensor coordinate uses Lagrange cubic interpolation on the four nearest
nodes along that axis (the cell containing it plus one neighbour on each
side, shifted inward near the edges); the 2D weights are tensor products.
The stencil moves with the sensor, so values are continuous in the sensor
position and derivatives are exact derivatives of the same interpolant.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .grid_fem import Grid

_TIE = 1e-12


@dataclass(frozen=True)
class SensorSet:
    """Sensor positions ``(N_r, 2)`` in km with per-coordinate bounds and freeze flags."""

    points: np.ndarray
    frozen: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        object.__setattr__(self, "points", pts)
        shape = pts.shape
        frozen = np.zeros(shape, bool) if self.frozen is None else np.broadcast_to(self.frozen, shape).astype(bool)
        lower = np.full(shape, -np.inf) if self.lower is None else np.broadcast_to(self.lower, shape).astype(float)
        upper = np.full(shape, np.inf) if self.upper is None else np.broadcast_to(self.upper, shape).astype(float)
        object.__setattr__(self, "frozen", frozen)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def __len__(self):
        return len(self.points)

    @property
    def free_mask(self) -> np.ndarray:
        return ~self.frozen

    def free_values(self) -> np.ndarray:
        return self.points[self.free_mask]

    def with_free_values(self, values) -> SensorSet:
        pts = self.points.copy()
        pts[self.free_mask] = values
        return replace(self, points=pts)

    def with_points(self, points) -> SensorSet:
        return replace(self, points=np.asarray(points, dtype=float))

    def validate(self, grid: Grid, sources=None):
        for p in self.points:
            if not grid.contains(*p):
                raise ValueError(f"sensor {tuple(p)} outside the domain")
        free = self.free_mask
        v = self.points[free]
        if np.any(v < self.lower[free] - 1e-12) or np.any(v > self.upper[free] + 1e-12):
            raise ValueError("free sensor coordinate outside its bounds")
        if sources is not None:
            for s in np.atleast_2d(sources):
                if np.any(np.all(np.isclose(self.points, s, atol=1e-12, rtol=0), axis=1)):
                    raise ValueError(f"sensor coincides with source {tuple(s)}")


def _cell(t: float, h: float, n: int) -> int:
    q = t / h
    r = np.rint(q)
    if abs(q - r) < _TIE:
        i = int(r) - 1  # on a node: take the left/lower cell
    else:
        i = int(np.floor(q))
    return min(max(i, 0), n - 2)


def lagrange_1d(t: float, h: float, n: int):
    """Stencil start, weights and derivative weights for coordinate ``t``."""
    size = min(4, n)
    start = min(max(_cell(t, h, n) - 1, 0), n - size)
    nodes = (start + np.arange(size)) * h
    w = np.ones(size)
    dw = np.zeros(size)
    for a in range(size):
        others = [c for c in range(size) if c != a]
        denom = np.prod([nodes[a] - nodes[c] for c in others])
        w[a] = np.prod([t - nodes[c] for c in others]) / denom
        dw[a] = sum(np.prod([t - nodes[c] for c in others if c != q]) for q in others) / denom
    return start, w, dw


@dataclass(frozen=True)
class RestrictionStencil:
    grid: Grid
    points: np.ndarray
    indices: np.ndarray  # (N_r, 16)
    weights: np.ndarray  # (N_r, 16)
    weights_dx: np.ndarray
    weights_dz: np.ndarray

    def _matrix(self, w) -> sp.csr_matrix:
        n = len(self.points)
        rows = np.repeat(np.arange(n), self.indices.shape[1])
        return sp.csr_matrix((w.ravel(), (rows, self.indices.ravel())), shape=(n, self.grid.M))

    @cached_property
    def R(self) -> sp.csr_matrix:
        return self._matrix(self.weights)

    @cached_property
    def Rx(self) -> sp.csr_matrix:
        return self._matrix(self.weights_dx)

    @cached_property
    def Rz(self) -> sp.csr_matrix:
        return self._matrix(self.weights_dz)

    def derivative_matrix(self, ell: int) -> sp.csr_matrix:
        return (self.Rx, self.Rz)[ell]


def build_stencil(grid: Grid, P) -> RestrictionStencil:
    points = P.points if isinstance(P, SensorSet) else np.atleast_2d(np.asarray(P, dtype=float))
    idx, w, wx, wz = [], [], [], []
    for x, z in points:
        if not grid.contains(x, z):
            raise ValueError(f"sensor ({x}, {z}) outside the domain")
        si, ax, dax = lagrange_1d(x, grid.hx, grid.n1)
        sj, az, daz = lagrange_1d(z, grid.hz, grid.n2)
        ii, jj = np.meshgrid(si + np.arange(len(ax)), sj + np.arange(len(az)), indexing="ij")
        idx.append(grid.index(ii, jj).ravel())
        w.append(np.outer(ax, az).ravel())
        wx.append(np.outer(dax, az).ravel())
        wz.append(np.outer(ax, daz).ravel())
    return RestrictionStencil(grid, points.copy(), np.array(idx), np.array(w), np.array(wx), np.array(wz))


def restrict(stencil: RestrictionStencil, u) -> np.ndarray:
    return stencil.R @ u


def restrict_adjoint(stencil: RestrictionStencil, z) -> np.ndarray:
    return stencil.R.T @ z


def sensor_derivative(stencil: RestrictionStencil, u, j: int, ell: int):
    w = (stencil.weights_dx, stencil.weights_dz)[ell][j]
    return w @ np.asarray(u)[stencil.indices[j]]
