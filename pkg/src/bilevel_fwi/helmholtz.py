"""Discrete Helmholtz solution operators with an impedance boundary condition.

The system matrix is ``A(m, w) = S - w^2 diag(d m) - i w diag(b sqrt(m))``.
``A`` is complex symmetric, so adjoint solves reuse the forward factorisation:
``(A^*)^{-1} g = conj(A^{-1} conj(g))``.

Every right-hand side column solved is counted on a process-wide
:class:`SolveCounter`, attributed to the phase active on the calling thread.
"""
from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid_fem import Grid, assemble_stiffness, nodal_weights


class FactorizationError(RuntimeError):
    """Raised when ``A(m, w)`` cannot be factorised (exactly singular)."""


class SolveCounter:
    """Thread-safe monotone count of Helmholtz solves, split by phase."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = Counter()
        self._local = threading.local()

    @property
    def current_phase(self) -> str:
        stack = getattr(self._local, "stack", None)
        return stack[-1] if stack else "other"

    @contextmanager
    def phase(self, name: str):
        stack = getattr(self._local, "stack", None)
        if stack is None:
            stack = self._local.stack = []
        stack.append(name)
        try:
            yield self
        finally:
            stack.pop()

    def add(self, n: int = 1):
        with self._lock:
            self._counts[self.current_phase] += int(n)

    def reset(self):
        with self._lock:
            self._counts.clear()

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)


COUNTER = SolveCounter()


def solve_count() -> dict[str, int]:
    """Current counter state as ``{"total": n, <phase>: n, ...}``."""
    snap = COUNTER.snapshot()
    snap["total"] = sum(snap.values())
    return snap


def counts_between(before: dict, after: dict) -> dict[str, int]:
    keys = set(before) | set(after)
    return {k: after.get(k, 0) - before.get(k, 0) for k in keys if after.get(k, 0) != before.get(k, 0)}


@dataclass
class BoundaryPair:
    """Interior and boundary parts of a right-hand side or field.

    Both parts are nodal vectors over the whole grid; the boundary part must
    vanish at interior nodes.  Parts are quadrature-weighted when used as a
    right-hand side.
    """

    interior: np.ndarray
    boundary: np.ndarray = None

    def __post_init__(self):
        self.interior = np.asarray(self.interior, dtype=complex)
        if self.boundary is None:
            self.boundary = np.zeros_like(self.interior)
        self.boundary = np.asarray(self.boundary, dtype=complex)

    def nodal(self) -> np.ndarray:
        return self.interior + self.boundary

    @classmethod
    def from_functions(cls, grid: Grid, f, f_b=None) -> BoundaryPair:
        """Weighted nodal vectors ``d_k f(x_k)`` and ``b_k f_b(x_k)``."""
        d, b = nodal_weights(grid)
        fi = d * np.broadcast_to(f(grid.x, grid.z), (grid.M,))
        fb = np.zeros(grid.M, dtype=complex) if f_b is None else b * np.broadcast_to(f_b(grid.x, grid.z), (grid.M,))
        return cls(fi, fb)


@dataclass(frozen=True)
class Operators:
    """Model-independent pieces of ``A``: stiffness and quadrature weights."""

    grid: Grid
    S: sp.csr_matrix
    d: np.ndarray
    b: np.ndarray

    @classmethod
    def build(cls, grid: Grid) -> Operators:
        d, b = nodal_weights(grid)
        return cls(grid, assemble_stiffness(grid), d, b)

    def system_matrix(self, m, omega: float) -> sp.csc_matrix:
        m = np.asarray(m, dtype=float)
        diag = -(omega**2) * self.d * m - 1j * omega * self.b * np.sqrt(m)
        return (self.S + sp.diags(diag)).tocsc()

    def g_coefficients(self, m, omega: float) -> np.ndarray:
        """Nodal weights of the operator ``G_{m,w}`` under nodal quadrature.

        ``c_k = w^2 d_k + i w b_k / (2 sqrt(m_k))``, equal to ``-dA/dm_k``.
        """
        return omega**2 * self.d + 1j * omega * self.b / (2.0 * np.sqrt(m))

    def g_coefficients_dm(self, m, omega: float) -> np.ndarray:
        """``d c_k / d m_k = -i w b_k / (4 m_k^{3/2})``."""
        return -1j * omega * self.b / (4.0 * np.asarray(m) ** 1.5)


@dataclass
class HelmholtzFactorization:
    """Sparse LU of ``A(m, w)`` serving forward and adjoint solves."""

    ops: Operators
    m: np.ndarray
    omega: float
    counter: SolveCounter = field(default=COUNTER, repr=False)
    n_solves: int = 0

    def __post_init__(self):
        self.m = np.array(self.m, dtype=float)
        self.m.setflags(write=False)
        self._lock = threading.Lock()
        try:
            # minimum degree on A + A^T suits the symmetric 5-point pattern
            self._lu = splu(self.ops.system_matrix(self.m, self.omega), permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise FactorizationError(f"A(m, omega={self.omega:g}) could not be factorised: {exc}") from exc

    @property
    def grid(self) -> Grid:
        return self.ops.grid

    @cached_property
    def matrix(self) -> sp.csc_matrix:
        return self.ops.system_matrix(self.m, self.omega)

    def _record(self, rhs):
        n = 1 if rhs.ndim == 1 else rhs.shape[1]
        with self._lock:
            self.n_solves += n
        self.counter.add(n)

    def solve_forward(self, rhs) -> np.ndarray:
        """``A^{-1} rhs``; 2D input solves one column per call count."""
        rhs = _as_rhs(rhs)
        self._record(rhs)
        out = self._lu.solve(rhs)
        if not np.all(np.isfinite(out)):
            raise FactorizationError("non-finite Helmholtz solution")
        return out

    def solve_adjoint(self, rhs) -> np.ndarray:
        """``(A^*)^{-1} rhs`` via the conjugated forward factorisation."""
        rhs = _as_rhs(rhs)
        self._record(rhs)
        out = np.conj(self._lu.solve(np.conj(rhs)))
        if not np.all(np.isfinite(out)):
            raise FactorizationError("non-finite Helmholtz solution")
        return out


def _as_rhs(rhs) -> np.ndarray:
    if isinstance(rhs, BoundaryPair):
        rhs = rhs.nodal()
    return np.ascontiguousarray(rhs, dtype=complex)


def factorize(grid_or_ops, m, omega: float, counter: SolveCounter = COUNTER) -> HelmholtzFactorization:
    if omega <= 0:
        raise ValueError("omega must be positive")
    m = np.asarray(m, dtype=float)
    if np.any(m <= 0):
        raise ValueError("model must be strictly positive")
    ops = grid_or_ops if isinstance(grid_or_ops, Operators) else Operators.build(grid_or_ops)
    return HelmholtzFactorization(ops, m, float(omega), counter=counter)


def solve_forward(fact: HelmholtzFactorization, rhs) -> np.ndarray:
    return fact.solve_forward(rhs)


def solve_adjoint(fact: HelmholtzFactorization, rhs) -> np.ndarray:
    return fact.solve_adjoint(rhs)


def hz_to_omega(freq_hz: float) -> float:
    return 2.0 * np.pi * float(freq_hz)


def point_source_rhs(grid: Grid, s) -> np.ndarray:
    """Nodal vector of ``int delta_s phi_j``: hat functions evaluated at ``s``."""
    x, z = float(s[0]), float(s[1])
    if not grid.contains(x, z, strict=True):
        raise ValueError(f"source {s} is not strictly inside the domain")
    tx, tz = x / grid.hx, z / grid.hz
    i = min(int(np.floor(tx)), grid.n1 - 2)
    j = min(int(np.floor(tz)), grid.n2 - 2)
    fx, fz = tx - i, tz - j
    rhs = np.zeros(grid.M)
    # cell split along (i,j)-(i+1,j+1): lower triangle when fz <= fx
    if fz <= fx:
        corners = [(i, j, 1.0 - fx), (i + 1, j, fx - fz), (i + 1, j + 1, fz)]
    else:
        corners = [(i, j, 1.0 - fz), (i + 1, j + 1, fx), (i, j + 1, fz - fx)]
    for a, c, w in corners:
        rhs[grid.index(a, c)] += w
    rhs[np.abs(rhs) < 1e-14] = 0.0
    return rhs


def apply_G(grid: Grid, m, omega: float, v: BoundaryPair) -> BoundaryPair:
    """``G_{m,w}(v, v_b) = (w^2 v, (i w / 2) v_b / sqrt(m) on the boundary)``."""
    m = np.asarray(m, dtype=float)
    if np.any(m <= 0):
        raise ValueError("model must be strictly positive")
    mask = grid.boundary
    vb = np.where(mask, 0.5j * omega * v.boundary / np.sqrt(m), 0.0)
    return BoundaryPair(omega**2 * v.interior, vb)
