"""Matrix-free Hessian-vector products of the FWI objective, PCG and preconditioners.

With ``c = -dA/dm`` (see :meth:`Operators.g_coefficients`), ``u`` the
forward fields and ``lam`` the adjoint fields at the reconstruction, a
product ``H v~`` needs two fresh solves per (source, frequency)::

    v = A^{-1} (c v~ u)
    z = A^{-*} (R^T R v - conj(c) v~ lam)
    H v~ = Re[c u conj(z)] - Re[c v conj(lam)] + Re[(i w b / 4 m^{3/2}) v~ u conj(lam)] + Gamma v~

The first term restricted to ``z1 = A^{-*} R^T R v`` is the Gauss-Newton
part ``H1``; everything else except ``Gamma`` is ``H2``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fwi_lower import Evaluation, FWIProblem
from .grid_fem import Grid, assemble_regulariser

log = logging.getLogger(__name__)

TERMS = ("h1", "h2", "reg")


class MissingCacheError(RuntimeError):
    pass


class HessianOperator:
    """Hessian of ``phi`` at a reconstruction, applied matrix-free.

    ``evaluation`` must come from ``problem.evaluate(m)`` with gradients on,
    so that forward fields, adjoint fields and factorisations are cached.
    ``terms`` selects which parts of ``H`` are applied.
    """

    def __init__(self, problem: FWIProblem, evaluation: Evaluation, terms=TERMS):
        if evaluation is None or evaluation.lam is None or not evaluation.factorizations and problem.n_pairs:
            raise MissingCacheError("Hessian needs cached forward/adjoint fields; evaluate the gradient first")
        bad = set(terms) - set(TERMS)
        if bad:
            raise ValueError(f"unknown Hessian terms {sorted(bad)}")
        self.problem = problem
        self.evaluation = evaluation
        self.terms = tuple(terms)
        self.m = evaluation.m
        self.n_products = 0

    @property
    def M(self) -> int:
        return self.problem.grid.M

    @property
    def shape(self):
        return (self.M, self.M)

    def hvp(self, vt) -> np.ndarray:
        vt = np.asarray(vt, dtype=float)
        if vt.shape != (self.M,):
            raise ValueError(f"expected a vector of length {self.M}")
        self.n_products += 1
        pb, ev = self.problem, self.evaluation
        out = pb.regulariser.apply(vt) if "reg" in self.terms else np.zeros(self.M)
        want1, want2 = "h1" in self.terms, "h2" in self.terms
        if not (want1 or want2) or not pb.n_pairs:
            return out
        R = pb.stencil.R
        RtR = (R.T @ R).tocsr()
        ops = pb.ops
        for omega, fact, u, lam in zip(pb.omegas, ev.factorizations, ev.u, ev.lam):
            c = ops.g_coefficients(self.m, omega)
            v = fact.solve_forward((c * vt)[:, None] * u)
            rhs = np.zeros_like(v)
            if want1:
                rhs += RtR @ v
            if want2:
                rhs -= (np.conj(c) * vt)[:, None] * lam
            z = fact.solve_adjoint(rhs)
            acc = np.real(c[:, None] * u * np.conj(z))
            if want2:
                acc -= np.real(c[:, None] * v * np.conj(lam))
                dc = ops.g_coefficients_dm(self.m, omega)
                acc -= np.real((dc * vt)[:, None] * u * np.conj(lam))
            out += acc.sum(axis=1)
        return out

    __call__ = hvp

    def dense(self) -> np.ndarray:
        """Assemble ``H`` column by column from products (small grids only)."""
        return np.column_stack([self.hvp(e) for e in np.eye(self.M)])


def hvp(op: HessianOperator, vtilde) -> np.ndarray:
    return op.hvp(vtilde)


# ---------------------------------------------------------------- direct sensitivities


def sensitivities(problem: FWIProblem, evaluation: Evaluation):
    """Per frequency, ``G = A^{-1}`` (``M`` solves) and the sensitivity maker.

    Yields ``(omega, c, dc, dU)`` where ``dU(s)`` returns the ``M x M``
    matrix ``G diag(c u_s)``, i.e. ``dU(s)[:, k] = du_s / dm_k``.  Building
    one source at a time keeps memory at two dense ``M x M`` arrays.
    """
    m = evaluation.m
    M = problem.grid.M
    for omega, fact, u in zip(problem.omegas, evaluation.factorizations, evaluation.u):
        G = fact.solve_forward(np.eye(M, dtype=complex))
        c = problem.ops.g_coefficients(m, omega)
        dc = problem.ops.g_coefficients_dm(m, omega)

        def dU(s, G=G, c=c, u=u):
            return G * (c * u[:, s])[None, :]

        yield omega, c, dc, dU


def direct_hessian(problem: FWIProblem, evaluation: Evaluation, terms=TERMS) -> np.ndarray:
    """Dense ``H`` from the Jacobian ``J = R dU`` and explicit second derivatives."""
    M = problem.grid.M
    H = np.zeros((M, M))
    if "reg" in terms:
        H += problem.regulariser.matrix.toarray()
    if not problem.n_pairs or not ({"h1", "h2"} & set(terms)):
        return H
    R = problem.stencil.R
    lam_all = evaluation.lam
    for w_idx, (omega, c, dc, dU) in enumerate(sensitivities(problem, evaluation)):
        u, lam = evaluation.u[w_idx], lam_all[w_idx]
        for s in range(u.shape[1]):
            dUs = dU(s)
            if "h1" in terms:
                J = R @ dUs
                H += np.real(J.T @ np.conj(J))
            if "h2" in terms:
                a = (c * np.conj(lam[:, s]))[:, None] * dUs
                H -= np.real(a + a.T)
                H -= np.diag(np.real(dc * u[:, s] * np.conj(lam[:, s])))
    return H


def direct_gradient(problem: FWIProblem, evaluation: Evaluation) -> np.ndarray:
    """Gradient via ``J^T`` of the residuals, using ``M`` solves per frequency."""
    R = problem.stencil.R
    g = problem.regulariser.apply(evaluation.m)
    for w_idx, (_, _, _, dU) in enumerate(sensitivities(problem, evaluation)):
        eps = evaluation.residuals[w_idx]
        for s in range(eps.shape[1]):
            g -= np.real((R @ dU(s)).T @ np.conj(eps[:, s]))
    return g


# ---------------------------------------------------------------- preconditioners


@dataclass
class Preconditioner:
    """Symmetric positive definite ``P``; :meth:`apply` returns ``P^{-1} r``."""

    kind: str
    _solve: object = field(repr=False, default=None)
    provenance: dict = field(default_factory=dict)

    def apply(self, r) -> np.ndarray:
        if self._solve is None:
            return np.array(r, dtype=float)
        return self._solve(np.asarray(r, dtype=float))

    __call__ = apply


def identity_preconditioner() -> Preconditioner:
    return Preconditioner("none")


def build_P2(grid: Grid, alpha0: float, mu: float, R=None) -> Preconditioner:
    """Sparse factorisation of ``Gamma(alpha0, mu)``; no Helmholtz solves."""
    gamma = assemble_regulariser(grid, alpha0, mu, R=R).matrix
    lu = splu(sp.csc_matrix(gamma))
    return Preconditioner("P2", lu.solve, {"alpha0": float(alpha0), "mu": float(mu)})


def factor_spd(H: np.ndarray, max_tries: int = 60):
    """Cholesky of ``H``, shifting by ``1e-10 tr(H)/M`` (doubling) on failure."""
    M = H.shape[0]
    shift = 0.0
    base = 1e-10 * abs(np.trace(H)) / M or 1e-10
    for _ in range(max_tries):
        try:
            return sla.cho_factor(H + shift * np.eye(M), lower=True), shift
        except np.linalg.LinAlgError:
            shift = base if shift == 0.0 else 2.0 * shift
    raise np.linalg.LinAlgError("could not factorise the shifted Hessian")


def build_P1(problem: FWIProblem, evaluation: Evaluation, terms=TERMS) -> Preconditioner:
    """Dense Hessian at the design it was built for, Cholesky-factorised.

    ``problem`` and ``evaluation`` describe the reference design
    (sensors ``P0``, weight ``alpha0``) and its reconstruction.
    """
    H = direct_hessian(problem, evaluation, terms)
    H = 0.5 * (H + H.T)
    cf, shift = factor_spd(H)
    if shift:
        log.info("P1 factorised with diagonal shift %.3e", shift)
    prov = {"alpha0": problem.alpha, "sensors": problem.sensors.points.tolist(), "shift": shift}
    return Preconditioner("P1", lambda r: sla.cho_solve(cf, r), prov)


# ---------------------------------------------------------------- PCG


@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    n_products: int
    converged: bool
    breakdown: bool
    hit_cap: bool
    residual_norms: list

    @property
    def relative_residual(self) -> float:
        r = self.residual_norms
        return r[-1] / r[0] if r and r[0] > 0 else 0.0


def pcg_solve(op, rhs, pre: Preconditioner = None, tol: float = 1e-15, x0=None, maxiter=None) -> PCGResult:
    """Preconditioned CG on ``op(x) = rhs`` until ``|r_n| <= tol |r_0|``.

    ``op`` is a callable (or :class:`HessianOperator`).  The residual is
    updated recursively, so every iteration costs exactly one product; a
    nonzero ``x0`` costs one more for the initial residual.  A nonpositive
    curvature ``p^T H p <= 0`` stops the iteration with ``breakdown`` set.
    """
    apply = op.hvp if isinstance(op, HessianOperator) else op
    rhs = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(rhs)):
        raise ValueError("right-hand side must be finite")
    if not 0 < tol < 1:
        raise ValueError("tol must lie in (0, 1)")
    n = rhs.size
    maxiter = 10 * n if maxiter is None else int(maxiter)
    pre = pre or identity_preconditioner()
    n_products = 0
    if x0 is None:
        x = np.zeros(n)
        r = rhs.copy()
    else:
        x = np.array(x0, dtype=float)
        r = rhs - apply(x)
        n_products += 1
    norms = [float(np.linalg.norm(r))]
    r0 = norms[0]
    if r0 == 0.0:
        return PCGResult(x, 0, n_products, True, False, False, norms)
    y = pre.apply(r)
    p = y.copy()
    ry = float(r @ y)
    it = 0
    breakdown = converged = False
    while it < maxiter:
        Hp = apply(p)
        n_products += 1
        it += 1
        pHp = float(p @ Hp)
        if not pHp > 0:
            breakdown = True
            log.warning("PCG breakdown: p^T H p = %.3e at iteration %d", pHp, it)
            break
        a = ry / pHp
        x += a * p
        r -= a * Hp
        norms.append(float(np.linalg.norm(r)))
        if norms[-1] <= tol * r0:
            converged = True
            break
        y = pre.apply(r)
        ry_new = float(r @ y)
        p = y + (ry_new / ry) * p
        ry = ry_new
    hit_cap = not converged and not breakdown
    if hit_cap:
        log.warning("PCG hit the iteration cap (%d) at relative residual %.3e", maxiter, norms[-1] / r0)
    return PCGResult(x, it, n_products, converged, breakdown, hit_cap, norms)
