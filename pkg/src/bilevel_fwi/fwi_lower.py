"""Lower-level FWI: misfit objective, adjoint-state gradient and L-BFGS.

The objective for one model ``m`` is::

    phi(m) = 1/2 sum_{s,w} |d(s,w) - R u(m,w,s)|^2 + 1/2 m^T Gamma(alpha, mu) m

and its gradient costs one forward and one adjoint solve per (source,
frequency) pair.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .acquisition import DataSet
from .grid_fem import Grid, assemble_regulariser
from .helmholtz import COUNTER, Operators, factorize, point_source_rhs
from .restriction import SensorSet, build_stencil

log = logging.getLogger(__name__)

DEFAULT_MU = 1e-6


@dataclass
class Evaluation:
    """phi, grad phi and the fields they were computed from, at one model."""

    m: np.ndarray
    phi: float
    misfit: float
    grad: np.ndarray | None
    u: np.ndarray  # (N_w, M, N_s)
    lam: np.ndarray | None  # (N_w, M, N_s)
    residuals: np.ndarray  # (N_w, N_r, N_s)
    factorizations: list


class FWIProblem:
    """FWI objective for fixed sensors, regularisation weight and data."""

    def __init__(self, grid_or_ops, data: DataSet, alpha: float, mu: float = DEFAULT_MU,
                 sensors: SensorSet = None, counter=COUNTER, R=None):
        self.ops = grid_or_ops if isinstance(grid_or_ops, Operators) else Operators.build(grid_or_ops)
        self.data = data
        self.sensors = data.sensors if sensors is None else sensors
        self.alpha = float(alpha)
        self.mu = float(mu)
        self.counter = counter
        self.regulariser = assemble_regulariser(self.grid, self.alpha, self.mu, R=R)
        self.sources = data.sources
        self.omegas = data.omegas
        # (N_w, N_r, N_s)
        self.observed = np.transpose(data.readings, (1, 2, 0))

    @property
    def grid(self) -> Grid:
        return self.ops.grid

    @cached_property
    def stencil(self):
        return build_stencil(self.grid, self.sensors)

    @cached_property
    def source_rhs(self) -> np.ndarray:
        if not self.n_pairs:
            return np.zeros((self.grid.M, 0))
        rhs = np.stack([point_source_rhs(self.grid, s) for s in self.sources], axis=1)
        return self.data.amplitude * rhs

    @property
    def n_pairs(self) -> int:
        return len(self.sources) * len(self.omegas)

    def evaluate(self, m, gradient: bool = True) -> Evaluation:
        m = np.asarray(m, dtype=float)
        R = self.stencil.R
        facts, us, lams, res = [], [], [], []
        misfit = 0.0
        grad = self.regulariser.apply(m) if gradient else None
        for omega, d_obs in zip(self.omegas, self.observed):
            if not len(self.sources):
                break
            fact = factorize(self.ops, m, omega, counter=self.counter)
            u = fact.solve_forward(self.source_rhs)
            eps = d_obs - R @ u
            misfit += 0.5 * float(np.sum(np.abs(eps) ** 2))
            facts.append(fact)
            us.append(u)
            res.append(eps)
            if gradient and u.shape[1]:
                lam = fact.solve_adjoint(R.T @ eps)
                c = self.ops.g_coefficients(m, omega)
                grad -= np.real(c[:, None] * u * np.conj(lam)).sum(axis=1)
                lams.append(lam)
        M = self.grid.M
        u_arr = np.array(us) if us else np.zeros((0, M, len(self.sources)), complex)
        lam_arr = (np.array(lams) if lams else np.zeros_like(u_arr)) if gradient else None
        res_arr = np.array(res) if res else np.zeros((0, len(self.sensors), len(self.sources)), complex)
        phi = misfit + self.regulariser.value(m)
        return Evaluation(m.copy(), phi, misfit, grad, u_arr, lam_arr, res_arr, facts)

    def objective(self, m) -> float:
        return self.evaluate(m, gradient=False).phi

    def gradient(self, m) -> np.ndarray:
        return self.evaluate(m).grad


def objective(m, P: SensorSet, alpha: float, data: DataSet, grid: Grid, mu: float = DEFAULT_MU) -> float:
    return FWIProblem(grid, data, alpha, mu, sensors=P).objective(m)


def gradient(m, P: SensorSet, alpha: float, data: DataSet, grid: Grid, mu: float = DEFAULT_MU):
    """Adjoint-state gradient; returns ``(grad, evaluation)`` with cached fields."""
    ev = FWIProblem(grid, data, alpha, mu, sensors=P).evaluate(m)
    return ev.grad, ev


# ---------------------------------------------------------------- line search


class LineSearchError(RuntimeError):
    pass


@dataclass
class LineSearchResult:
    step: float
    f: float
    g: np.ndarray
    extra: object
    n_evals: int
    success: bool
    message: str = ""


def _cubic_min(a, fa, da, b, fb, db):
    """Minimiser of the cubic through two points with slopes, or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def wolfe_line_search(fun, x, d, f0=None, g0=None, c1=1e-4, c2=0.9, step0=1.0,
                      step_max=np.inf, max_evals=30, approx_rtol=0.0) -> LineSearchResult:
    """Bracketing/zoom line search for the strong Wolfe conditions.

    ``fun(x)`` returns ``(f, g)`` or ``(f, g, extra)``.  Trial steps never
    exceed ``step_max``; if the bracket phase reaches it with sufficient
    decrease and a still-negative slope, that step is returned with
    ``success=False`` and ``message="step_max"``.

    Near a minimiser, ``f`` differences fall below rounding and the Armijo
    test becomes meaningless.  With ``approx_rtol > 0`` a trial with
    ``|f - f0| <= approx_rtol |f0|`` whose slope satisfies the curvature bound
    is accepted as well (``message="approximate wolfe"``).  Accepted values
    are then non-increasing only up to that rounding allowance.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    n_evals = 0

    def call(step):
        nonlocal n_evals
        n_evals += 1
        out = fun(x + step * d)
        f, g = out[0], np.asarray(out[1])
        return float(f), g, (out[2] if len(out) > 2 else None), float(g @ d)

    if f0 is None or g0 is None:
        f0, g0, _, _ = call(0.0)
        n_evals = 0
    dphi0 = float(np.asarray(g0) @ d)
    if not dphi0 < 0:
        raise LineSearchError(f"not a descent direction (slope {dphi0:g})")
    if not step_max > 0:
        raise LineSearchError("empty feasible step interval")

    best = None  # best Armijo point seen, used if the search fails

    def armijo(step, f):
        return f <= f0 + c1 * step * dphi0

    def approx_wolfe(f, dphi):
        # Hager-Zhang style test for when f differences drown in rounding:
        # no increase in f, and the slope has flattened enough
        return (approx_rtol > 0 and abs(f - f0) <= approx_rtol * abs(f0)
                and c2 * dphi0 <= dphi <= -c2 * dphi0)

    def note(step, f, g, extra):
        nonlocal best
        if armijo(step, f) and f < f0 and (best is None or f < best[1]):
            best = (step, f, g, extra)

    def zoom(lo, hi):
        a_lo, f_lo, d_lo = lo
        a_hi, f_hi, d_hi = hi
        while n_evals < max_evals:
            trial = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            lo_b, hi_b = sorted((a_lo, a_hi))
            width = hi_b - lo_b
            if trial is None or not (lo_b + 0.1 * width <= trial <= hi_b - 0.1 * width):
                trial = 0.5 * (a_lo + a_hi)
            f, g, extra, dphi = call(trial)
            note(trial, f, g, extra)
            if approx_wolfe(f, dphi):
                return LineSearchResult(trial, f, g, extra, n_evals, True, "approximate wolfe")
            if not armijo(trial, f) or f >= f_lo:
                a_hi, f_hi, d_hi = trial, f, dphi
            else:
                if abs(dphi) <= -c2 * dphi0:
                    return LineSearchResult(trial, f, g, extra, n_evals, True)
                if dphi * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, d_lo = trial, f, dphi
            if abs(a_hi - a_lo) <= 1e-16 * max(1.0, abs(a_lo)):
                break
        return None

    prev = (0.0, f0, dphi0)
    step = min(step0, step_max)
    result = None
    for i in range(max_evals):
        f, g, extra, dphi = call(step)
        note(step, f, g, extra)
        if approx_wolfe(f, dphi) and not (armijo(step, f) and abs(dphi) <= -c2 * dphi0):
            return LineSearchResult(step, f, g, extra, n_evals, True, "approximate wolfe")
        if not armijo(step, f) or (i > 0 and f >= prev[1]):
            result = zoom(prev, (step, f, dphi))
            break
        if abs(dphi) <= -c2 * dphi0:
            return LineSearchResult(step, f, g, extra, n_evals, True)
        if dphi >= 0:
            result = zoom((step, f, dphi), prev)
            break
        if step >= step_max:
            return LineSearchResult(step, f, g, extra, n_evals, False, "step_max")
        prev = (step, f, dphi)
        step = min(2.0 * step, step_max)
        if n_evals >= max_evals:
            break
    if result is not None:
        return result
    if best is not None:
        s, f, g, extra = best
        return LineSearchResult(s, f, g, extra, n_evals, False, "wolfe curvature not met")
    return LineSearchResult(0.0, f0, np.asarray(g0), None, n_evals, False, "no sufficient decrease")


# ---------------------------------------------------------------- L-BFGS


@dataclass
class LBFGSOptions:
    memory: int = 10
    gtol: float = 1e-10
    # optional relative test ||g|| <= gtol_rel ||g(x0)||; 0 disables it
    gtol_rel: float = 0.0
    max_iter: int = 5000
    c1: float = 1e-4
    c2: float = 0.9
    max_ls_evals: int = 30
    # "scaled_identity" (standard) or "regulariser" (H0 = Gamma^{-1})
    initial_hessian: str = "scaled_identity"
    # without curvature pairs, the first trial step changes x by this
    # fraction of max|x| in the infinity norm
    first_step: float = 1e-2
    # rounding allowance for the approximate Wolfe test; 0 keeps accepted
    # values strictly non-increasing
    approx_wolfe_rtol: float = 0.0


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    extra: object
    iterations: int
    n_evals: int
    converged: bool
    status: str
    history: list = field(default_factory=list)
    n_first: int = 0  # evaluations that were the first trial of a line search (or x0)
    grad_norm0: float = float("nan")

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.g))


def lbfgs(fun, x0, opts: LBFGSOptions = None, max_step=None, h0=None, eval_phase=None) -> MinimizeResult:
    """L-BFGS with the two-loop recursion and a strong Wolfe line search.

    ``max_step(x, d)`` bounds the step (used to keep iterates feasible).
    ``h0(q)`` applies an initial inverse Hessian shape, rescaled each
    iteration by ``s^T y / y^T h0(y)``; without it the usual
    ``s^T y / y^T y`` scaling is used.  ``eval_phase(first_trial)`` returns a
    context manager wrapping each evaluation, so that solver work done by
    extra line-search trials can be attributed separately.
    """
    opts = opts or LBFGSOptions()
    trial_no = 0
    n_first = 0

    def wrapped(x):
        nonlocal trial_no, n_first
        first = trial_no == 0
        n_first += first
        trial_no += 1
        if eval_phase is None:
            out = fun(x)
        else:
            with eval_phase(first):
                out = fun(x)
        return out if len(out) > 2 else (out[0], out[1], None)

    x = np.array(x0, dtype=float)
    f, g, extra = wrapped(x)
    n_evals = 1
    history = [f]
    mem = deque(maxlen=opts.memory)
    it = 0
    status = "max_iter"
    converged = False
    grad_norm0 = float(np.linalg.norm(g))
    gtol = max(opts.gtol, opts.gtol_rel * grad_norm0)
    while True:
        gnorm = float(np.linalg.norm(g))
        if gnorm <= gtol:
            converged, status = True, "gtol"
            break
        if it >= opts.max_iter:
            break
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(mem):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if mem:
            s, y, _ = mem[-1]
            if h0 is None:
                r = (s @ y) / (y @ y) * q
            else:
                r = h0(q)
                r *= (s @ y) / (y @ h0(y))
        else:
            r = q * (opts.first_step * max(np.abs(x).max(), 1.0e-300) / np.abs(q).max())
        for (s, y, rho), a in zip(mem, reversed(alphas)):
            b = rho * (y @ r)
            r += s * (a - b)
        d = -r
        if not g @ d < 0:
            mem.clear()
            d = -g * (opts.first_step * max(np.abs(x).max(), 1.0e-300) / np.abs(g).max())
        smax = np.inf if max_step is None else max_step(x, d)
        trial_no = 0
        try:
            ls = wolfe_line_search(wrapped, x, d, f, g, opts.c1, opts.c2, 1.0, smax, opts.max_ls_evals,
                                   opts.approx_wolfe_rtol)
        except LineSearchError as exc:
            status = f"line_search_failed: {exc}"
            break
        n_evals += ls.n_evals
        if ls.step == 0.0 or ls.f > f + opts.approx_wolfe_rtol * abs(f):
            if mem:
                mem.clear()
                continue
            status = f"line_search_failed: {ls.message}"
            break
        x_new = x + ls.step * d
        s, y = x_new - x, ls.g - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            mem.append((s, y, 1.0 / sy))
        x, f, g, extra = x_new, ls.f, ls.g, ls.extra
        history.append(f)
        it += 1
    return MinimizeResult(x, f, g, extra, it, n_evals, converged, status, history, n_first, grad_norm0)


@dataclass
class LowerSolveReport:
    """Reconstruction and the cached fields at the accepted final iterate."""

    m: np.ndarray
    phi: float
    grad_norm: float
    iterations: int
    n_evals: int
    converged: bool
    status: str
    evaluation: Evaluation
    history: list
    solves: dict = field(default_factory=dict)
    n_lower: int = 0  # gradient evaluations excluding extra line-search trials
    grad_norm0: float = float("nan")


def max_positive_step(x, d, fraction=0.99):
    neg = d < 0
    if not np.any(neg):
        return np.inf
    return fraction * float(np.min(-x[neg] / d[neg]))


def lbfgs_minimize(problem: FWIProblem, start, opts: LBFGSOptions = None) -> LowerSolveReport:
    """Minimise ``phi`` from ``start``; positivity is kept by bounding the step.

    Solves from the first trial of each iteration are counted in phase
    ``lower``; extra line-search trials go to ``lower_ls``.
    """
    opts = opts or LBFGSOptions()
    start = np.asarray(start, dtype=float)
    if np.any(start <= 0):
        raise ValueError("starting model must be positive")
    counter = problem.counter
    before = counter.snapshot()

    def fun(m):
        ev = problem.evaluate(m)
        return ev.phi, ev.grad, ev

    h0 = None
    if opts.initial_hessian == "regulariser":
        from scipy.sparse.linalg import factorized

        solve_gamma = factorized(problem.regulariser.matrix.tocsc())
        h0 = solve_gamma
    elif opts.initial_hessian != "scaled_identity":
        raise ValueError(f"unknown initial_hessian {opts.initial_hessian!r}")

    def phase(first):
        return counter.phase("lower" if first else "lower_ls")

    # sqrt(m) only enters through the Helmholtz operators; a pure regulariser
    # problem needs no positivity guard
    guard = max_positive_step if problem.n_pairs else None
    res = lbfgs(fun, start, opts, max_step=guard, h0=h0, eval_phase=phase)
    after = counter.snapshot()
    solves = {k: after.get(k, 0) - before.get(k, 0) for k in after if after.get(k, 0) != before.get(k, 0)}
    if not res.converged:
        log.info("lower-level L-BFGS stopped: %s after %d iterations (|g|=%.3e)", res.status, res.iterations, res.grad_norm)
    return LowerSolveReport(res.x, res.f, res.grad_norm, res.iterations, res.n_evals, res.converged,
                            res.status, res.extra, res.history, solves, res.n_first, res.grad_norm0)
