"""Uniform rectangular grids and the model-independent P1 finite element operators.

Nodes are ordered lexicographically with the vertical index running fastest,
``k = i * n2 + j`` for horizontal index ``i`` and vertical index ``j``.  With
this ordering the difference operators are literal Kronecker products,
``D_x = D_{n1} (x) I_{n2}`` and ``D_z = I_{n1} (x) D_{n2}``.

Every cell is split into two triangles along the diagonal joining its
lower-left node ``(i, j)`` to its upper-right node ``(i + 1, j + 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

INTERIOR, EDGE, CORNER = 0, 1, 2


@dataclass(frozen=True)
class Grid:
    """Uniform ``n1 x n2`` node grid on ``[0, width_x] x [0, width_z]`` (km)."""

    n1: int
    n2: int
    width_x: float
    width_z: float

    def __post_init__(self):
        if self.n1 < 2 or self.n2 < 2:
            raise ValueError(f"grid needs at least 2 nodes per direction, got {self.n1}x{self.n2}")
        if not (self.width_x > 0 and self.width_z > 0):
            raise ValueError("grid widths must be positive")

    @property
    def hx(self) -> float:
        return self.width_x / (self.n1 - 1)

    @property
    def hz(self) -> float:
        return self.width_z / (self.n2 - 1)

    @property
    def M(self) -> int:
        return self.n1 * self.n2

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n1, self.n2)

    def index(self, i, j):
        return np.asarray(i) * self.n2 + np.asarray(j)

    def ij(self, k):
        return np.divmod(np.asarray(k), self.n2)

    @cached_property
    def x(self) -> np.ndarray:
        return np.repeat(np.arange(self.n1) * self.hx, self.n2)

    @cached_property
    def z(self) -> np.ndarray:
        return np.tile(np.arange(self.n2) * self.hz, self.n1)

    @cached_property
    def classification(self) -> np.ndarray:
        """Per-node flag: ``INTERIOR``, ``EDGE`` or ``CORNER``."""
        i, j = self.ij(np.arange(self.M))
        on_x = (i == 0) | (i == self.n1 - 1)
        on_z = (j == 0) | (j == self.n2 - 1)
        flags = np.full(self.M, INTERIOR, dtype=np.int8)
        flags[on_x | on_z] = EDGE
        flags[on_x & on_z] = CORNER
        return flags

    @property
    def boundary(self) -> np.ndarray:
        return self.classification != INTERIOR

    def as_image(self, values) -> np.ndarray:
        """Reshape nodal values to an ``(n2, n1)`` array, depth along rows."""
        return np.asarray(values).reshape(self.n1, self.n2).T

    def from_image(self, image) -> np.ndarray:
        return np.asarray(image).T.reshape(-1)

    def contains(self, x, z, strict=False) -> bool:
        if strict:
            return 0.0 < x < self.width_x and 0.0 < z < self.width_z
        return 0.0 <= x <= self.width_x and 0.0 <= z <= self.width_z

    def refined(self, factor: int) -> Grid:
        """Grid with every cell split into ``factor x factor`` cells."""
        if factor < 1:
            raise ValueError("refinement factor must be >= 1")
        return Grid((self.n1 - 1) * factor + 1, (self.n2 - 1) * factor + 1, self.width_x, self.width_z)


def build_grid(n1: int, n2: int, width_x: float, width_z: float) -> Grid:
    return Grid(int(n1), int(n2), float(width_x), float(width_z))


def difference_matrix(n: int) -> sp.csr_matrix:
    """The ``(n - 1) x n`` forward difference matrix scaled by ``n - 1``."""
    if n < 2:
        raise ValueError("difference matrix needs n >= 2")
    e = np.full(n - 1, float(n - 1))
    return sp.diags([e, -e], [0, 1], shape=(n - 1, n), format="csr")


@dataclass(frozen=True)
class Regulariser:
    """``Gamma = alpha * R + mu * I`` with ``R = D_x^T D_x + D_z^T D_z``."""

    alpha: float
    mu: float
    R: sp.csr_matrix

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        n = self.R.shape[0]
        return (self.alpha * self.R + self.mu * sp.identity(n, format="csr")).tocsr()

    def apply(self, v):
        return self.alpha * (self.R @ v) + self.mu * np.asarray(v)

    def apply_R(self, v):
        return self.R @ v

    def value(self, m) -> float:
        return 0.5 * float(m @ self.apply(m))


def laplacian_penalty(grid: Grid) -> sp.csr_matrix:
    Dx = sp.kron(difference_matrix(grid.n1), sp.identity(grid.n2), format="csr")
    Dz = sp.kron(sp.identity(grid.n1), difference_matrix(grid.n2), format="csr")
    return (Dx.T @ Dx + Dz.T @ Dz).tocsr()


def assemble_regulariser(grid: Grid, alpha: float, mu: float, R=None) -> Regulariser:
    if mu <= 0:
        raise ValueError("mu must be positive")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return Regulariser(float(alpha), float(mu), laplacian_penalty(grid) if R is None else R)


def triangles(grid: Grid) -> np.ndarray:
    """``(2 (n1-1)(n2-1), 3)`` node indices, counter-clockwise in (x, z)."""
    i, j = np.meshgrid(np.arange(grid.n1 - 1), np.arange(grid.n2 - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    ll = grid.index(i, j)
    lr = grid.index(i + 1, j)
    ul = grid.index(i, j + 1)
    ur = grid.index(i + 1, j + 1)
    lower = np.stack([ll, lr, ur], axis=1)
    upper = np.stack([ll, ur, ul], axis=1)
    return np.concatenate([lower, upper])


def assemble_stiffness(grid: Grid) -> sp.csr_matrix:
    """P1 stiffness matrix ``S_ij = int grad(phi_i) . grad(phi_j)``."""
    tri = triangles(grid)
    xy = np.stack([grid.x, grid.z], axis=1)[tri]  # (T, 3, 2)
    # edge opposite vertex a: e_a = x_c - x_b (cyclic)
    edges = np.roll(xy, -2, axis=1) - np.roll(xy, -1, axis=1)
    area = 0.5 * grid.hx * grid.hz
    local = np.einsum("tad,tbd->tab", edges, edges) / (4.0 * area)
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    S = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(grid.M, grid.M)).tocsr()
    S.eliminate_zeros()
    return S


def nodal_weights(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Lumped mass weights ``d`` and boundary weights ``b`` from nodal quadrature."""
    tri = triangles(grid)
    d = np.bincount(tri.ravel(), minlength=grid.M) * (grid.hx * grid.hz / 6.0)

    b = np.zeros(grid.M)
    i, j = grid.ij(np.arange(grid.M))
    for fixed, along, h, n_along in (
        (j == 0, i, grid.hx, grid.n1),
        (j == grid.n2 - 1, i, grid.hx, grid.n1),
        (i == 0, j, grid.hz, grid.n2),
        (i == grid.n1 - 1, j, grid.hz, grid.n2),
    ):
        nodes = np.flatnonzero(fixed)
        ends = (along[nodes] == 0) | (along[nodes] == n_along - 1)
        b[nodes] += np.where(ends, 0.5 * h, h)
    return d, b


def prolong(coarse: Grid, fine: Grid, values) -> np.ndarray:
    """Bilinear interpolation of nodal values from ``coarse`` onto ``fine``."""
    if (coarse.width_x, coarse.width_z) != (fine.width_x, fine.width_z):
        raise ValueError("grids must cover the same rectangle")
    xs = np.linspace(0.0, coarse.width_x, coarse.n1)
    zs = np.linspace(0.0, coarse.width_z, coarse.n2)
    interp = RegularGridInterpolator((xs, zs), np.asarray(values).reshape(coarse.shape))
    pts = np.stack([np.clip(fine.x, 0, coarse.width_x), np.clip(fine.z, 0, coarse.width_z)], axis=1)
    return interp(pts)
