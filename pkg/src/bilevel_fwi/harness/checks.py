"""Finite-difference and direct-oracle checks of the derivative machinery.

Each check builds a small self-contained instance and returns a dict of
measured errors next to the thresholds they are judged against.
"""
from __future__ import annotations

import time

import numpy as np

from ..acquisition import generate_data
from ..bilevel_upper import (
    COUNTED_PHASES,
    BilevelEvaluator,
    DesignSpace,
    TrainingSet,
    UpperOptions,
    grad_psi_alpha,
    grad_psi_positions,
    optimise_group,
    predicted_solve_count,
)
from ..fwi_lower import FWIProblem, LBFGSOptions
from ..grid_fem import build_grid
from ..helmholtz import COUNTER
from ..hessian_ops import HessianOperator, direct_gradient, direct_hessian
from ..restriction import SensorSet
from .models import initial_model, layered_model


def small_problem(n1=8, n2=8, seed=0, alpha=1e-3, mu=1e-6, freqs=(0.7, 1.3)):
    """Random positive model and data from another random model, two sources and sensors."""
    rng = np.random.default_rng(seed)
    g = build_grid(n1, n2, 1.0, 1.0)
    m = 0.25 + 0.05 * rng.random(g.M)
    mp = 0.25 + 0.05 * rng.random(g.M)
    P = SensorSet([[0.83, 0.3], [0.77, 0.61]])
    src = [[0.1, 0.2], [0.12, 0.7]]
    data = generate_data(g, mp, P, list(freqs), src, refine=2)
    return FWIProblem(g, data, alpha=alpha, mu=mu), m, rng


def lower_gradient_fd(n1=12, n2=10, components=20, seed=1, rel_step=1e-6) -> dict:
    pb, m, rng = small_problem(n1, n2, seed)
    grad = pb.gradient(m)
    errs = []
    for k in rng.choice(pb.grid.M, size=components, replace=False):
        h = rel_step * m[k]
        e = np.zeros_like(m)
        e[k] = h
        fd = (pb.objective(m + e) - pb.objective(m - e)) / (2 * h)
        errs.append(abs(fd - grad[k]) / abs(grad[k]))
    return {"check": "lower_gradient_fd", "max_rel_err": float(max(errs)), "threshold": 1e-6}


def lower_gradient_direct(n=8, seed=0) -> dict:
    pb, m, _ = small_problem(n, n, seed)
    ev = pb.evaluate(m)
    gd = direct_gradient(pb, ev)
    err = float(np.abs(gd - ev.grad).max() / np.abs(ev.grad).max())
    return {"check": "lower_gradient_direct", "max_rel_err": err, "threshold": 1e-10}


def hessian_checks(n=8, seed=0) -> list[dict]:
    pb, m, rng = small_problem(n, n, seed)
    ev = pb.evaluate(m)
    op = HessianOperator(pb, ev)
    v, w = rng.standard_normal(pb.grid.M), rng.standard_normal(pb.grid.M)
    Hv, Hw = op.hvp(v), op.hvp(w)
    sym = abs(w @ Hv - v @ Hw) / max(abs(w @ Hv), 1e-300)
    h = 1e-5
    fd = (pb.gradient(m + h * v) - pb.gradient(m - h * v)) / (2 * h)
    fd_err = float(np.linalg.norm(fd - Hv) / np.linalg.norm(fd))
    H1 = HessianOperator(pb, ev, terms=("h1",)).dense()
    q = min(float(x @ H1 @ x) / float(x @ x) for x in rng.standard_normal((20, pb.grid.M)))
    dense_err = float(np.abs(op.dense() - direct_hessian(pb, ev)).max())
    return [
        {"check": "hvp_symmetry", "max_rel_err": float(sym), "threshold": 1e-10},
        {"check": "hvp_fd", "max_rel_err": fd_err, "threshold": 1e-5},
        {"check": "h1_quadratic_form", "min_value": q, "threshold": -1e-12},
        {"check": "dense_vs_direct", "max_abs_err": dense_err, "threshold": 1e-8},
    ]


def upper_instance(n=10, amplitude=1.0, freqs=(1.0, 2.0), n_models=1):
    g = build_grid(n, n, 1.0, 1.0)
    models = [layered_model(g, seed=3 + k, c_top=1.5, c_bottom=3.0, smooth_cells=1.0) for k in range(n_models)]
    m0 = initial_model(g, 1.5, 3.0)
    src = [[0.15, 0.3], [0.15, 0.7]]
    T = TrainingSet(g, models, src, list(freqs), refine=2, amplitude=amplitude)
    return g, T, m0


def upper_gradient_fd(n=10, alpha=1e-4, rel_step=1e-4, lower_gtol=1e-12) -> list[dict]:
    """``d psi / d p`` and ``d psi / d alpha`` against central differences of ``psi``."""
    g, T, m0 = upper_instance(n)
    freqs = tuple(T.freqs_hz)
    P = SensorSet([[0.85, 0.35], [0.8, 0.62]], frozen=[[True, False], [False, False]], lower=0.05, upper=0.95)
    lower = LBFGSOptions(gtol=lower_gtol, max_iter=20000, approx_wolfe_rtol=1e-12)
    opts = UpperOptions(lower=lower, warm_start=False, mu=1e-6)
    ev = BilevelEvaluator(T, freqs, [m0], opts)
    t0 = time.time()
    st = ev.evaluate(P, alpha)
    gp, ga = grad_psi_positions(st), grad_psi_alpha(st)

    def psi_at(PP, a):
        return ev.evaluate(PP, a, gradient=False).psi

    rows = []
    h = rel_step * g.hx
    for j, ell in [(0, 1), (1, 0), (1, 1)]:
        pts = P.points.copy()
        pts[j, ell] += h
        pp = psi_at(P.with_points(pts), alpha)
        pts[j, ell] -= 2 * h
        pm = psi_at(P.with_points(pts), alpha)
        fd = (pp - pm) / (2 * h)
        rows.append({"check": f"dpsi_dp[{j},{ell}]", "fd": fd, "adjoint": float(gp[j, ell]),
                     "max_rel_err": abs(fd - gp[j, ell]) / abs(fd), "threshold": 1e-3})
    ha = rel_step * alpha
    fd = (psi_at(P, alpha + ha) - psi_at(P, alpha - ha)) / (2 * ha)
    rows.append({"check": "dpsi_dalpha", "fd": fd, "adjoint": ga, "max_rel_err": abs(fd - ga) / abs(fd),
                 "threshold": 1e-3})
    lower_norm = st.models[0].report.grad_norm
    for r in rows:
        r["lower_grad_norm"] = lower_norm
        r["seconds"] = time.time() - t0
    return rows


def accounting_check(N_lower=4, N_CG=5, N_upper=2, n=10, counter=COUNTER) -> dict:
    """Pinned caps: measured iterate solves against ``N_upper (2 N_lower + 2 N_CG + 1) N_data``.

    ``N_lower`` gradient evaluations means ``N_lower - 1`` L-BFGS iterations
    after the initial one; ``N_CG`` products means ``N_CG - 1`` PCG
    iterations after the initial residual.
    """
    g, T, m0 = upper_instance(n, n_models=2)
    freqs = tuple(T.freqs_hz)
    P = SensorSet([[0.85, 0.35], [0.85, 0.62]], frozen=[[True, False], [True, False]], lower=0.05, upper=0.95)
    opts = UpperOptions(lower=LBFGSOptions(gtol=0.0, max_iter=N_lower - 1), pcg_tol=1e-30,
                        pcg_maxiter=N_CG - 1, max_iter=N_upper - 1, mu=1e-6)
    res = optimise_group(T, P, 1e-3, freqs, [m0, m0], DesignSpace(P, True, True), opts, counter=counter)
    measured = sum(v for k, v in res.iterate_solves.items() if k in COUNTED_PHASES)
    n_data = len(T.sources) * len(freqs) * len(T)
    n_up = len(res.history)
    lowers = {x for h in res.history for x in h["N_lower"]}
    cgs = {x for h in res.history for x in h["N_CG"]}
    predicted = predicted_solve_count(n_up, N_lower, N_CG, n_data)
    return {"check": "solve_accounting", "measured": int(measured), "predicted": int(predicted),
            "N_upper": n_up, "N_lower": sorted(lowers), "N_CG": sorted(cgs), "N_data": n_data,
            "ok": bool(measured == predicted and lowers == {N_lower} and cgs == {N_CG})}


def run_all(cfg: dict) -> list[dict]:
    gc = cfg["gradcheck"]
    rows = [lower_gradient_fd(12, 10, int(gc["components"]), int(gc["seed"])),
            lower_gradient_direct(int(gc["n1"]))]
    rows += hessian_checks(int(gc["n1"]))
    rows += upper_gradient_fd(int(gc["upper_n"]))
    rows.append(accounting_check())
    for r in rows:
        if "ok" in r:
            continue
        if "min_value" in r:
            r["ok"] = bool(r["min_value"] >= r["threshold"])
        else:
            err = r.get("max_rel_err", r.get("max_abs_err"))
            r["ok"] = bool(err < r["threshold"])
    return rows
