"""Upper level: reconstruction-error objective, its design gradients and optimisation.

For training models ``m'`` with reconstructions ``m = m_FWI(P, alpha, m')``::

    psi(P, alpha) = 1/(2 N) sum ||m' - m||^2

Implicit differentiation of ``grad phi(m) = 0`` gives, with
``H rho = m' - m`` and ``tau = A^{-1}(c rho u)`` per (source, frequency)::

    d psi / d alpha  = 1/N sum m^T R rho
    d psi / d p_{jl} = -1/N sum Re[ dtau(p_j) conj(eps_j) + tau(p_j) conj(dd_j - du(p_j)) ]

where ``eps = d - R u``, ``dd_j`` is the slope of the observed reading at
sensor ``j`` along coordinate ``l`` and ``du``, ``dtau`` are slopes of the
interpolated fields.  Each gradient costs one PCG solve with the Hessian and
one extra forward solve per (source, frequency), independently of the number
of design parameters.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .acquisition import DataSet, SyntheticRecording
from .fwi_lower import DEFAULT_MU, FWIProblem, LBFGSOptions, LowerSolveReport, lbfgs_minimize
from .grid_fem import Grid
from .helmholtz import COUNTER, Operators, counts_between, factorize, point_source_rhs
from .hessian_ops import HessianOperator, PCGResult, Preconditioner, build_P1, build_P2, pcg_solve
from .restriction import SensorSet

log = logging.getLogger(__name__)

# phases whose solves are part of the cost model; everything else
# (setup, extra line-search trials) is bookkeeping
COUNTED_PHASES = ("lower", "cg", "tau")


class LowerLevelError(RuntimeError):
    def __init__(self, model_id, cause):
        super().__init__(f"lower-level solve failed for training model {model_id}: {cause}")
        self.model_id = model_id


# ---------------------------------------------------------------- training data


class TrainingSet:
    """Training models with their fine-grid recordings at all configured frequencies."""

    def __init__(self, grid: Grid, models: Sequence, sources, freqs_hz, refine: int = 2,
                 amplitude: float = 1.0, counter=COUNTER):
        self.grid = grid
        self.ops = Operators.build(grid)
        self.models = [np.asarray(m, dtype=float) for m in models]
        for k, m in enumerate(self.models):
            if m.shape != (grid.M,) or np.any(m <= 0):
                raise ValueError(f"training model {k} must be positive with {grid.M} entries")
        self.sources = np.atleast_2d(np.asarray(sources, dtype=float))
        self.freqs_hz = np.atleast_1d(np.asarray(freqs_hz, dtype=float))
        self.amplitude = float(amplitude)
        with counter.phase("setup"):
            self.recordings = [
                SyntheticRecording(grid, m, self.sources, self.freqs_hz, refine, amplitude, counter=counter)
                for m in self.models
            ]
        self._coarse = {}

    def __len__(self):
        return len(self.models)

    def data(self, k: int, P: SensorSet, freqs_hz=None) -> DataSet:
        return self.recordings[k].dataset(P, freqs_hz)

    def coarse_fields(self, k: int, freqs_hz, counter=COUNTER) -> np.ndarray:
        """``u(m')`` on the inversion grid, ``(N_w, M, N_s)``, computed once per frequency."""
        out = []
        rhs = self.amplitude * np.stack([point_source_rhs(self.grid, s) for s in self.sources], axis=1)
        for f in np.atleast_1d(freqs_hz):
            key = (k, float(f))
            if key not in self._coarse:
                with counter.phase("setup"):
                    fact = factorize(self.ops, self.models[k], 2 * np.pi * f, counter=counter)
                    self._coarse[key] = fact.solve_forward(rhs)
            out.append(self._coarse[key])
        return np.array(out)


@dataclass(frozen=True)
class FrequencySchedule:
    """Ordered frequency groups (Hz) and whether ``alpha`` is optimised in each."""

    groups: tuple
    optimise_alpha: tuple = None

    def __post_init__(self):
        groups = tuple(tuple(float(f) for f in np.atleast_1d(g)) for g in self.groups)
        if not groups or any(len(g) == 0 for g in groups):
            raise ValueError("frequency groups must be non-empty")
        maxima = [max(g) for g in groups]
        if any(b < a for a, b in zip(maxima, maxima[1:])):
            raise ValueError("groups must be ordered by non-decreasing maximum frequency")
        flags = self.optimise_alpha
        if flags is None:
            flags = tuple(k == len(groups) - 1 for k in range(len(groups)))
        flags = tuple(bool(f) for f in flags)
        if len(flags) != len(groups):
            raise ValueError("one alpha flag per group is required")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "optimise_alpha", flags)

    @property
    def frequencies(self) -> tuple:
        seen = []
        for g in self.groups:
            seen.extend(f for f in g if f not in seen)
        return tuple(seen)


# ---------------------------------------------------------------- design map


@dataclass
class DesignSpace:
    """Map between an unconstrained-shape vector ``theta`` and ``(P, alpha)``.

    Free sensor coordinates equal ``offset + T @ theta[:k]``; by default ``T``
    is the identity on the free coordinates.  When ``alpha`` is optimised the
    last entry of ``theta`` is ``log(alpha)``.
    """

    base: SensorSet
    optimise_positions: bool = True
    optimise_alpha: bool = False
    tie: np.ndarray = None
    offset: np.ndarray = None
    theta_bounds: list = None
    alpha_bounds: tuple = (1e-4, 1e4)

    def __post_init__(self):
        n_free = int(self.base.free_mask.sum())
        if self.tie is None:
            self.tie = np.eye(n_free)
            self.offset = np.zeros(n_free)
            if self.theta_bounds is None:
                free = self.base.free_mask
                self.theta_bounds = list(zip(self.base.lower[free], self.base.upper[free]))
        else:
            self.tie = np.atleast_2d(np.asarray(self.tie, dtype=float))
            if self.tie.shape[0] != n_free:
                raise ValueError("tie matrix needs one row per free coordinate")
            self.offset = np.zeros(n_free) if self.offset is None else np.asarray(self.offset, dtype=float)
            if self.theta_bounds is None:
                self.theta_bounds = [(None, None)] * self.tie.shape[1]
        if not self.optimise_positions:
            self.theta_bounds = []

    @property
    def n_positions(self) -> int:
        return self.tie.shape[1] if self.optimise_positions else 0

    def encode(self, P: SensorSet, alpha: float) -> np.ndarray:
        parts = []
        if self.optimise_positions:
            rhs = P.free_values() - self.offset
            parts.append(np.linalg.lstsq(self.tie, rhs, rcond=None)[0])
        if self.optimise_alpha:
            parts.append([np.log(alpha)])
        return np.concatenate(parts) if parts else np.zeros(0)

    def decode(self, theta, P: SensorSet, alpha: float):
        theta = np.asarray(theta, dtype=float)
        if self.optimise_positions:
            P = P.with_free_values(self.offset + self.tie @ theta[: self.n_positions])
        if self.optimise_alpha:
            alpha = float(np.exp(theta[-1]))
        return P, alpha

    def gradient(self, g_positions, g_alpha, alpha) -> np.ndarray:
        """Chain rule from free-coordinate and ``alpha`` derivatives to ``theta``."""
        parts = []
        if self.optimise_positions:
            parts.append(self.tie.T @ g_positions)
        if self.optimise_alpha:
            parts.append([alpha * g_alpha])
        return np.concatenate(parts) if parts else np.zeros(0)

    def bounds(self) -> list:
        b = list(self.theta_bounds)
        if self.optimise_alpha:
            lo, hi = self.alpha_bounds
            b.append((np.log(lo), np.log(hi)))
        return b


# ---------------------------------------------------------------- per-model pieces


@dataclass
class UpperOptions:
    lower: LBFGSOptions = field(default_factory=LBFGSOptions)
    mu: float = DEFAULT_MU
    pcg_tol: float = 1e-15
    pcg_maxiter: int = None
    preconditioner: str = "P2"  # P2 | P1 | none
    pgtol: float = 1e-10
    max_iter: int = 50
    stall_tol: float = 1e-12
    warm_start: bool = True
    # "data": observed-reading slopes (exact for the posed problem);
    # "coarse": readings and slopes of u(m') simulated on the inversion grid
    residual: str = "data"
    threads: int = 1
    log_path: str = None


@dataclass
class ModelState:
    """Everything computed for one training model at one design."""

    report: LowerSolveReport
    problem: FWIProblem
    rho: np.ndarray = None
    pcg: PCGResult = None
    tau: np.ndarray = None  # (N_w, M, N_s)
    grad_positions: np.ndarray = None  # (N_r, 2)
    grad_alpha: float = None
    solves: dict = field(default_factory=dict)

    @property
    def m_fwi(self) -> np.ndarray:
        return self.report.m


@dataclass
class BilevelState:
    sensors: SensorSet
    alpha: float
    freqs_hz: tuple
    reconstructions: list
    models: list = field(default_factory=list)  # ModelState per training model
    psi: float = None
    log: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)

    @property
    def rho(self) -> list:
        return [s.rho for s in self.models]


def psi_value(models, reconstructions) -> float:
    n = len(models)
    if n == 0:
        raise ValueError("no training models")
    return sum(float(np.sum((mp - m) ** 2)) for mp, m in zip(models, reconstructions)) / (2.0 * n)


def solve_rho(op: HessianOperator, rhs, pre: Preconditioner = None, tol: float = 1e-15, maxiter=None) -> PCGResult:
    """``H rho = m' - m_FWI`` by PCG from the all-ones vector."""
    rhs = np.asarray(rhs, dtype=float)
    if not np.any(rhs):
        return PCGResult(np.zeros_like(rhs), 0, 0, True, False, False, [0.0])
    return pcg_solve(op, rhs, pre, tol=tol, x0=np.ones_like(rhs), maxiter=maxiter)


def tau_field(problem: FWIProblem, evaluation, rho) -> np.ndarray:
    """``tau = A^{-1}(c rho u)`` per frequency; one forward solve per (source, frequency)."""
    rho = np.asarray(rho, dtype=float)
    out = []
    for omega, fact, u in zip(problem.omegas, evaluation.factorizations, evaluation.u):
        c = problem.ops.g_coefficients(evaluation.m, omega)
        out.append(fact.solve_forward((c * rho)[:, None] * u))
    return np.array(out) if out else np.zeros_like(evaluation.u)


def position_gradient(problem: FWIProblem, evaluation, tau, obs_slopes=None, ref_fields=None) -> np.ndarray:
    """``(N_r, 2)`` array of ``-sum Re[dtau conj(eps) + tau conj(dd - du)]`` over (s, w).

    ``obs_slopes`` are observed-reading slopes ``(N_s, N_w, N_r, 2)``; if
    ``ref_fields`` (``u(m')`` on the inversion grid) is given instead, both the
    residual and the slopes are formed from it.
    """
    st = problem.stencil
    n_r = len(problem.sensors)
    g = np.zeros((n_r, 2))
    for w, (u, t) in enumerate(zip(evaluation.u, tau)):
        Ru, Rt = st.R @ u, st.R @ t  # (N_r, N_s)
        if ref_fields is None:
            eps = evaluation.residuals[w]
        else:
            eps = st.R @ ref_fields[w] - Ru
        for ell, D in enumerate((st.Rx, st.Rz)):
            du, dt = D @ u, D @ t
            if ref_fields is None:
                dd = obs_slopes[:, w, :, ell].T  # (N_r, N_s)
            else:
                dd = D @ ref_fields[w]
            g[:, ell] -= np.real(dt * np.conj(eps) + Rt * np.conj(dd - du)).sum(axis=1)
    return g


def alpha_gradient(problem: FWIProblem, m_fwi, rho) -> float:
    return float(np.asarray(m_fwi) @ problem.regulariser.apply_R(rho))


# ---------------------------------------------------------------- evaluation of a design


class BilevelEvaluator:
    """Evaluates ``psi`` and its gradient at designs for one frequency group.

    Keeps the latest reconstructions as warm starts and records the solve
    counts of every evaluation so iterate costs can be separated from
    line-search costs.
    """

    def __init__(self, T: TrainingSet, freqs_hz, starts, opts: UpperOptions = None,
                 P2: Preconditioner = None, counter=COUNTER):
        self.T = T
        self.freqs = tuple(float(f) for f in np.atleast_1d(freqs_hz))
        self.opts = opts or UpperOptions()
        self.counter = counter
        self.starts = [np.array(s, dtype=float) for s in starts]
        if len(self.starts) != len(T):
            raise ValueError("one starting model per training model is required")
        self.fixed_starts = [s.copy() for s in self.starts]
        self.P2 = P2
        self.P1 = {}
        self.records = []
        # absolute lower tolerance per model, fixed from its first solve so
        # that warm starts are not held to a tighter relative target
        self.gtol_abs = {}

    def _pre(self, k, problem, evaluation):
        kind = self.opts.preconditioner
        if kind == "none":
            return None
        if kind == "P2":
            if self.P2 is None:
                self.P2 = build_P2(self.T.grid, problem.alpha, problem.mu)
            return self.P2
        if kind == "P1":
            if k not in self.P1:
                with self.counter.phase("precon"):
                    self.P1[k] = build_P1(problem, evaluation)
            return self.P1[k]
        raise ValueError(f"unknown preconditioner {kind!r}")

    def _one(self, k, P, alpha, gradient):
        opts, counter = self.opts, self.counter
        before = counter.snapshot()
        data = self.T.data(k, P, self.freqs)
        problem = FWIProblem(self.T.ops, data, alpha, opts.mu, counter=counter)
        start = self.starts[k] if opts.warm_start else self.fixed_starts[k]
        lower = opts.lower
        if lower.gtol_rel > 0 and k in self.gtol_abs:
            lower = replace(lower, gtol=self.gtol_abs[k], gtol_rel=0.0)
        try:
            report = lbfgs_minimize(problem, start, lower)
        except Exception as exc:  # noqa: BLE001 - re-raised with the model id
            raise LowerLevelError(k, exc) from exc
        if lower.gtol_rel > 0:
            self.gtol_abs[k] = max(lower.gtol, lower.gtol_rel * report.grad_norm0)
        st = ModelState(report, problem)
        if gradient:
            ev = report.evaluation
            op = HessianOperator(problem, ev)
            pre = self._pre(k, problem, ev)
            with counter.phase("cg"):
                res = solve_rho(op, self.T.models[k] - report.m, pre, opts.pcg_tol, opts.pcg_maxiter)
            if res.breakdown:
                log.warning("rho-system breakdown for model %d", k)
            st.rho, st.pcg = res.x, res
            with counter.phase("tau"):
                st.tau = tau_field(problem, ev, st.rho)
            if opts.residual == "data":
                st.grad_positions = position_gradient(problem, ev, st.tau, obs_slopes=data.slopes)
            elif opts.residual == "coarse":
                ref = self.T.coarse_fields(k, self.freqs, counter)
                st.grad_positions = position_gradient(problem, ev, st.tau, ref_fields=ref)
            else:
                raise ValueError(f"unknown residual mode {opts.residual!r}")
            st.grad_alpha = alpha_gradient(problem, report.m, st.rho)
        st.solves = counts_between(before, counter.snapshot())
        return st

    def evaluate(self, P: SensorSet, alpha: float, gradient: bool = True) -> BilevelState:
        ks = range(len(self.T))
        if self.opts.threads > 1:
            with ThreadPoolExecutor(self.opts.threads) as pool:
                states = list(pool.map(lambda k: self._one(k, P, alpha, gradient), ks))
        else:
            states = [self._one(k, P, alpha, gradient) for k in ks]
        recon = [s.m_fwi for s in states]
        if self.opts.warm_start:
            self.starts = [m.copy() for m in recon]
        state = BilevelState(P, alpha, self.freqs, recon, states, psi_value(self.T.models, recon))
        solves = {}
        for s in states:
            for key, n in s.solves.items():
                solves[key] = solves.get(key, 0) + n
        state.ledger = {
            "solves": solves,
            "N_lower": [s.report.n_lower for s in states],
            "N_CG": [s.pcg.n_products if s.pcg else 0 for s in states],
        }
        self.records.append(state)
        return state

    def gradients(self, state: BilevelState):
        n = len(self.T)
        gp = sum(s.grad_positions for s in state.models) / n
        ga = sum(s.grad_alpha for s in state.models) / n
        return gp, ga


def psi(P: SensorSet, alpha: float, T: TrainingSet, starts, freqs_hz=None, opts: UpperOptions = None,
        gradient: bool = False) -> tuple[float, BilevelState]:
    freqs = T.freqs_hz if freqs_hz is None else freqs_hz
    ev = BilevelEvaluator(T, freqs, starts, opts)
    state = ev.evaluate(P, alpha, gradient=gradient)
    return state.psi, state


def grad_psi_positions(state: BilevelState) -> np.ndarray:
    """Mean position gradient over training models; frozen coordinates are 0."""
    g = sum(s.grad_positions for s in state.models) / len(state.models)
    return np.where(state.sensors.frozen, 0.0, g)


def grad_psi_alpha(state: BilevelState) -> float:
    return sum(s.grad_alpha for s in state.models) / len(state.models)


def predicted_solve_count(N_upper: int, N_lower: int, N_CG: int, N_data: int) -> int:
    """Helmholtz solves for a bilevel run: ``N_upper (2 N_lower + 2 N_CG + 1) N_data``."""
    return N_upper * (2 * N_lower + 2 * N_CG + 1) * N_data


# ---------------------------------------------------------------- group optimisation


@dataclass
class GroupResult:
    state: BilevelState
    sensors: SensorSet
    alpha: float
    iterations: int
    rule: str
    message: str
    history: list
    evaluations: int
    iterate_solves: dict


def _stop_rule(res, stalled) -> str:
    if stalled:
        return "stall"
    msg = res.message if isinstance(res.message, str) else res.message.decode()
    if "PGTOL" in msg.upper():
        return "pgtol"
    upper = msg.upper()
    if "ABNORMAL" in upper or "LNSRCH" in upper or "RELATIVE REDUCTION" in upper or "STOPITERATION" in upper:
        return "stall"
    if res.nit >= 0 and ("ITERATIONS" in msg.upper() or "MAXITER" in msg.upper()):
        return "max_iter"
    return "other"


def optimise_group(T: TrainingSet, P0: SensorSet, alpha0: float, freqs_hz, starts,
                   space: DesignSpace = None, opts: UpperOptions = None, P2: Preconditioner = None,
                   group_id=0, counter=COUNTER) -> GroupResult:
    """Bound-constrained L-BFGS over the design for one frequency group.

    Stops on projected-gradient infinity norm below ``opts.pgtol`` (rule
    "pgtol"), on two consecutive iterations with relative ``psi`` change and
    parameter change both below ``opts.stall_tol`` or a failed line search
    (rule "stall"), or after ``opts.max_iter`` iterations (rule "max_iter").
    """
    opts = opts or UpperOptions()
    space = space or DesignSpace(P0)
    ev = BilevelEvaluator(T, freqs_hz, starts, opts, P2=P2, counter=counter)
    cache = {}

    def fg(theta):
        key = theta.tobytes()
        if key not in cache:
            P, alpha = space.decode(theta, P0, alpha0)
            state = ev.evaluate(P, alpha, gradient=True)
            gp, ga = ev.gradients(state)
            gp = np.where(P.frozen, 0.0, gp)
            g = space.gradient(gp[P.free_mask], ga, alpha)
            cache.clear()
            cache[key] = (state, g)
        state, g = cache[key]
        return state.psi, g

    theta0 = space.encode(P0, alpha0)
    bounds = space.bounds()
    history = []
    accepted = []
    stall = {"count": 0, "fired": False, "prev": None}
    log_fh = open(opts.log_path, "a") if opts.log_path else None

    def projected_inf(theta, g):
        pg = g.copy()
        for i, (lo, hi) in enumerate(bounds):
            if lo is not None and theta[i] <= lo and g[i] > 0:
                pg[i] = 0.0
            if hi is not None and theta[i] >= hi and g[i] < 0:
                pg[i] = 0.0
        return float(np.max(np.abs(pg))) if pg.size else 0.0

    def record(theta):
        fg(theta)
        state, g = cache[theta.tobytes()]
        accepted.append(next(i for i, r in enumerate(ev.records) if r is state))
        entry = {
            "group": group_id,
            "iter": len(history),
            "freqs_hz": list(ev.freqs),
            "psi": state.psi,
            "pg_inf": projected_inf(theta, g),
            "alpha": state.alpha,
            "sensors": state.sensors.points.tolist(),
            "solves": state.ledger["solves"],
            "N_lower": state.ledger["N_lower"],
            "N_CG": state.ledger["N_CG"],
        }
        history.append(entry)
        if log_fh:
            log_fh.write(json.dumps(entry) + "\n")
            log_fh.flush()
        return state

    def callback(intermediate_result):
        theta = np.asarray(intermediate_result.x)
        prev = stall["prev"]
        state = record(theta)
        if prev is not None:
            dpsi = abs(prev[1] - state.psi) / max(abs(prev[1]), 1e-300)
            dx = float(np.max(np.abs(theta - prev[0]))) if theta.size else 0.0
            stall["count"] = stall["count"] + 1 if (dpsi < opts.stall_tol and dx < opts.stall_tol) else 0
        stall["prev"] = (theta.copy(), state.psi)
        if stall["count"] >= 2:
            stall["fired"] = True
            raise StopIteration

    try:
        if theta0.size == 0:
            fg(theta0)
            record(theta0)
            res = None
        else:
            fg(theta0)
            record(theta0)
            stall["prev"] = (theta0.copy(), history[-1]["psi"])
            res = minimize(
                fg, theta0, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
                options={"maxiter": opts.max_iter, "gtol": opts.pgtol, "ftol": 0.0, "maxls": 20},
            )
    finally:
        if log_fh:
            log_fh.close()

    if res is None:
        rule, message, nit, theta = "no_parameters", "nothing to optimise", 0, theta0
    else:
        rule, message, nit, theta = _stop_rule(res, stall["fired"]), str(res.message), int(res.nit), res.x
        if nit == 0 and history and history[0]["pg_inf"] <= opts.pgtol:
            rule = "pgtol"
    # make sure the returned state is the one at the final iterate
    final_key = np.asarray(theta, dtype=float).tobytes()
    if final_key not in cache:
        fg(np.asarray(theta, dtype=float))
    state = cache[final_key][0]
    P, alpha = space.decode(theta, P0, alpha0)
    iterate_solves = {}
    for idx in accepted:
        for key, n in ev.records[idx].ledger["solves"].items():
            iterate_solves[key] = iterate_solves.get(key, 0) + n
    summary = {"group": group_id, "rule": rule, "iterations": nit, "message": message}
    if opts.log_path:
        with open(opts.log_path, "a") as fh:
            fh.write(json.dumps(summary) + "\n")
    log.info("group %s finished: %s after %d iterations (psi=%.6e)", group_id, rule, nit, state.psi)
    return GroupResult(state, P, alpha, nit, rule, message, history, len(ev.records), iterate_solves)


@dataclass
class ContinuationResult:
    sensors: SensorSet
    alpha: float
    reconstructions: list
    groups: list


def frequency_continuation(T: TrainingSet, schedule: FrequencySchedule, P0: SensorSet, alpha0: float,
                           starts, opts: UpperOptions = None, tie=None, offset=None, theta_bounds=None,
                           optimise_positions: bool = True, optimise_alpha: bool = True,
                           alpha_bounds=(1e-4, 1e4), counter=COUNTER) -> ContinuationResult:
    """Optimise group by group, passing design and reconstructions forward.

    ``alpha`` is optimised only in groups flagged by the schedule (and only
    if ``optimise_alpha``).  ``P2`` is built once at ``alpha0``.
    """
    opts = opts or UpperOptions()
    P, alpha = P0, float(alpha0)
    recon = [np.array(s, dtype=float) for s in starts]
    P2 = build_P2(T.grid, alpha0, opts.mu) if opts.preconditioner == "P2" else None
    results = []
    for gid, (group, flag) in enumerate(zip(schedule.groups, schedule.optimise_alpha)):
        space = DesignSpace(P, optimise_positions, optimise_alpha and flag, tie=tie, offset=offset,
                            theta_bounds=theta_bounds, alpha_bounds=tuple(alpha_bounds))
        try:
            res = optimise_group(T, P, alpha, group, recon, space, opts, P2=P2, group_id=gid, counter=counter)
        except Exception as exc:
            raise RuntimeError(f"frequency group {gid} {group} failed: {exc}") from exc
        P, alpha, recon = res.sensors, res.alpha, res.state.reconstructions
        results.append(res)
    return ContinuationResult(P, alpha, recon, results)
