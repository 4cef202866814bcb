"""Experiment drivers behind the CLI subcommands.

Every driver takes a config dict (see :mod:`.config`) and an output
directory, writes its tables and arrays there and returns a summary dict
with an ``ok`` flag.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..acquisition import SyntheticRecording, add_noise
from ..bilevel_upper import (
    BilevelEvaluator,
    DesignSpace,
    FrequencySchedule,
    TrainingSet,
    UpperOptions,
    frequency_continuation,
    optimise_group,
    psi_value,
)
from ..fwi_lower import FWIProblem, LBFGSOptions, lbfgs_minimize
from ..grid_fem import Grid, build_grid
from ..helmholtz import COUNTER, Operators, factorize, hz_to_omega, point_source_rhs
from ..hessian_ops import HessianOperator, build_P1, build_P2, pcg_solve
from ..restriction import SensorSet
from . import plotting, report
from .config import STRATEGIES
from .metrics import MetricsRow, improvement_factor, mre, ssim
from .models import initial_model, load_and_slice, marmousi_like, model_to_velocity, slice_model

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- setup


@dataclass
class Setup:
    grid: Grid
    slices: list  # true models, slice k is slices[k - 1]
    start: np.ndarray
    sources: np.ndarray
    sensors: SensorSet


def build_setup(cfg: dict) -> Setup:
    mc = cfg["model"]
    if mc["file"]:
        grid, slices = load_and_slice(mc["file"], int(mc["n_slices"]))
    else:
        full_grid, full = marmousi_like(mc["n1"], mc["n2"], mc["width_x"], mc["width_z"], mc["seed"],
                                        mc["smooth_cells"])
        grid, slices = slice_model(full_grid, full, int(mc["n_slices"]))
    start = initial_model(grid, cfg["start"]["c_top"], cfg["start"]["c_bottom"])
    sources = np.array([[cfg["sources"]["x"], z] for z in cfg["sources"]["z"]], dtype=float)
    return Setup(grid, slices, start, sources, initial_sensors(cfg, grid))


def initial_sensors(cfg: dict, grid: Grid) -> SensorSet:
    """Borehole sensors: fixed ``x``, depths free within ``[z_min, z_max]``."""
    sc = cfg["sensors"]
    x = grid.width_x - sc["x_from_right"]
    if sc["initial"] is not None:
        pts = np.asarray(sc["initial"], dtype=float)
    else:
        rng = np.random.default_rng(sc["seed"])
        zs = np.sort(rng.uniform(sc["z_min"], sc["z_max"], int(sc["count"])))
        pts = np.array([[x, z] for z in zs])
    frozen = [[bool(sc["freeze_x"]), False]] * len(pts)
    lower = [[0.0, sc["z_min"]]] * len(pts)
    upper = [[grid.width_x, sc["z_max"]]] * len(pts)
    P = SensorSet(pts, frozen=frozen, lower=lower, upper=upper)
    P.validate(grid)
    return P


def lower_options(cfg: dict) -> LBFGSOptions:
    lc = cfg["lower"]
    return LBFGSOptions(memory=int(lc["memory"]), gtol=float(lc["gtol"]), gtol_rel=float(lc["gtol_rel"]),
                        max_iter=int(lc["max_iter"]), approx_wolfe_rtol=float(lc["approx_wolfe_rtol"]))


def upper_options(cfg: dict, log_path=None) -> UpperOptions:
    uc = cfg["upper"]
    return UpperOptions(
        lower=lower_options(cfg), mu=float(cfg["mu"]), pcg_tol=float(uc["pcg_tol"]),
        pcg_maxiter=uc["pcg_maxiter"], preconditioner=uc["preconditioner"], pgtol=float(uc["pgtol"]),
        max_iter=int(uc["max_iter"]), stall_tol=float(uc["stall_tol"]), residual=uc["residual"],
        threads=int(cfg["threads"]), log_path=None if log_path is None else str(log_path),
    )


def schedule(cfg: dict) -> FrequencySchedule:
    fc = cfg["frequencies"]
    return FrequencySchedule(tuple(tuple(g) for g in fc["groups"]), fc["optimise_alpha"])


def reconstruct(grid: Grid, m_true, start, sources, P: SensorSet, alpha: float, groups, cfg: dict,
                noise_db=None, seed=0):
    """FWI through the frequency groups (each warm-started from the last)."""
    freqs = sorted({f for g in groups for f in g})
    rec = SyntheticRecording(grid, m_true, sources, freqs, int(cfg["refine"]), float(cfg["amplitude"]))
    ops = Operators.build(grid)
    m = np.array(start, dtype=float)
    reports = []
    for gi, g in enumerate(groups):
        data = rec.dataset(P, g)
        if noise_db is not None and np.isfinite(noise_db):
            data = add_noise(data, noise_db, seed=[*np.ravel(seed).astype(int).tolist(), gi])
        problem = FWIProblem(ops, data, alpha, float(cfg["mu"]))
        r = lbfgs_minimize(problem, m, lower_options(cfg))
        reports.append(r)
        m = r.m
    return m, reports


def _write_model_outputs(out: Path, tag: str, grid: Grid, m, m_true, plots: bool, sensors=None, sources=None):
    np.save(out / f"{tag}.npy", m)
    report.write_matrix(out / f"{tag}_velocity.dat", grid.as_image(model_to_velocity(m)).T)
    if m_true is not None:
        _, re = mre(m, m_true)
        report.write_matrix(out / f"{tag}_relerr.dat", grid.as_image(re).T)
    if plots:
        plotting.safe(plotting.model_image, out / f"{tag}_velocity.png", grid, model_to_velocity(m),
                      title=tag, sensors=sensors, sources=sources, label="c (km/s)")
        if m_true is not None:
            plotting.safe(plotting.model_image, out / f"{tag}_relerr.png", grid, re, title=f"{tag} RE (%)",
                          cmap="magma", label="%")


# ---------------------------------------------------------------- forward / fwi


def run_forward(cfg: dict, out: Path) -> dict:
    """One Helmholtz solve on a slice; writes the wavefield magnitude and phase."""
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    fc = cfg["forward"]
    m = setup.slices[int(fc["slice"]) - 1]
    s = setup.sources[int(fc["source"])]
    omega = hz_to_omega(float(fc["freq_hz"]))
    before = COUNTER.total
    fact = factorize(setup.grid, m, omega)
    u = fact.solve_forward(float(cfg["amplitude"]) * point_source_rhs(setup.grid, s))
    residual = float(np.linalg.norm(fact.matrix @ u - float(cfg["amplitude"]) * point_source_rhs(setup.grid, s)))
    img = setup.grid.as_image(u).T
    report.write_matrix(out / "wavefield_real.dat", img.real)
    report.write_matrix(out / "wavefield_abs.dat", np.abs(img))
    np.save(out / "wavefield.npy", u)
    if cfg["plots"]:
        plotting.safe(plotting.model_image, out / "wavefield_real.png", setup.grid, u.real,
                      title=f"Re u, {fc['freq_hz']} Hz", sources=[s], cmap="seismic")
    summary = {
        "ok": bool(np.all(np.isfinite(u))), "solves": COUNTER.total - before, "residual": residual,
        "max_abs": float(np.abs(u).max()), "M": setup.grid.M,
    }
    report.write_csv(out / "forward.csv", [summary])
    return summary


def run_fwi(cfg: dict, out: Path) -> dict:
    """Lower level only: reconstruct one slice at the initial design."""
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    k = int(cfg["fwi"]["slice"])
    m_true = setup.slices[k - 1]
    groups = [tuple(cfg["fwi"]["freqs_hz"])]
    t0 = time.time()
    m, reports = reconstruct(setup.grid, m_true, setup.start, setup.sources, setup.sensors,
                             float(cfg["alpha0"]), groups, cfg, noise_db=cfg["noise_db"], seed=cfg["seed"])
    row = {
        "slice": k, "alpha": float(cfg["alpha0"]),
        "mre_start": mre(setup.start, m_true)[0], "mre_fwi": mre(m, m_true)[0],
        "ssim_start": ssim(setup.start, m_true, setup.grid), "ssim_fwi": ssim(m, m_true, setup.grid),
        "iterations": sum(r.iterations for r in reports), "status": reports[-1].status,
        "grad_norm": reports[-1].grad_norm, "seconds": time.time() - t0,
    }
    report.write_csv(out / "fwi.csv", [row])
    _write_model_outputs(out, f"slice{k}_fwi", setup.grid, m, m_true, cfg["plots"],
                         setup.sensors.points, setup.sources)
    _write_model_outputs(out, f"slice{k}_true", setup.grid, m_true, None, cfg["plots"])
    row["ok"] = bool(np.all(np.isfinite(m)) and np.all(m > 0))
    return row


# ---------------------------------------------------------------- bilevel


def learn(setup: Setup, train: list, cfg: dict, out: Path, strategy: str):
    """Bilevel learning on the training slices; returns ``(P, alpha, result)``."""
    opt_p, opt_a = STRATEGIES[strategy]
    P0, alpha0 = setup.sensors, float(cfg["alpha0"])
    if not (opt_p or opt_a):
        return P0, alpha0, None
    sched = schedule(cfg)
    models = [setup.slices[k - 1] for k in train]
    T = TrainingSet(setup.grid, models, setup.sources, sched.frequencies, int(cfg["refine"]),
                    float(cfg["amplitude"]))
    opts = upper_options(cfg, out / f"upper_{strategy}.jsonl")
    alpha_sched = sched
    if opt_a and not opt_p:
        # alpha alone: optimise it in every group
        alpha_sched = FrequencySchedule(sched.groups, (True,) * len(sched.groups))
    lo, hi = cfg["upper"]["alpha_bounds"]
    res = frequency_continuation(T, alpha_sched, P0, alpha0, [setup.start] * len(models), opts,
                                 optimise_positions=opt_p, optimise_alpha=opt_a, alpha_bounds=(lo, hi))
    return res.sensors, res.alpha, res


def evaluate_design(setup: Setup, cfg: dict, slices: list, P: SensorSet, alpha: float, tag: str, out: Path):
    """Noisy-data reconstructions of ``slices`` at a design; returns per-slice results."""
    groups = schedule(cfg).groups
    res = {}
    for k in slices:
        m_true = setup.slices[k - 1]
        m, _ = reconstruct(setup.grid, m_true, setup.start, setup.sources, P, alpha, groups, cfg,
                           noise_db=cfg["noise_db"], seed=[int(cfg["seed"]), k])
        res[k] = {
            "m": m,
            "psi": psi_value([m_true], [m]),
            "mre": mre(m, m_true)[0],
            "ssim": ssim(m, m_true, setup.grid),
        }
        _write_model_outputs(out, f"slice{k}_{tag}", setup.grid, m, m_true, cfg["plots"], P.points, setup.sources)
    return res


def run_bilevel(cfg: dict, out: Path, train=None, test=None, strategy=None, setup=None) -> dict:
    """Learn ``(P, alpha)`` on the training slices, then score every slice.

    Scores use reconstructions from data with ``noise_db`` noise at the
    starting and at the learned design.
    """
    out.mkdir(parents=True, exist_ok=True)
    setup = setup or build_setup(cfg)
    train = [int(k) for k in (train or cfg["split"]["train"])]
    test = [int(k) for k in (test or cfg["split"]["test"])]
    strategy = strategy or cfg["strategy"]
    t0 = time.time()
    ok = True
    try:
        P, alpha, res = learn(setup, train, cfg, out, strategy)
    except Exception as exc:  # noqa: BLE001 - recorded, reported through the exit code
        log.error("bilevel learning failed: %s", exc)
        return {"ok": False, "error": str(exc), "strategy": strategy}
    t_learn = time.time() - t0
    slices = sorted(set(train) | set(test))
    start = evaluate_design(setup, cfg, slices, setup.sensors, float(cfg["alpha0"]), "start", out)
    opt = start if res is None and strategy == "none" else evaluate_design(setup, cfg, slices, P, alpha,
                                                                           f"opt_{strategy}", out)
    rows = []
    for k in slices:
        a, b = start[k], opt[k]
        rows.append(MetricsRow(k, "test" if k in test else "train", strategy, a["mre"], b["mre"], a["ssim"],
                               b["ssim"], improvement_factor(a["psi"], b["psi"]), a["psi"], b["psi"]))
    report.write_csv(out / f"metrics_{strategy}.csv", rows)
    design = {
        "strategy": strategy, "train": train, "test": test, "alpha0": float(cfg["alpha0"]), "alpha": alpha,
        "sensors0": setup.sensors.points, "sensors": P.points, "learn_seconds": t_learn,
        "groups": [] if res is None else [
            {"rule": g.rule, "iterations": g.iterations, "psi": g.state.psi, "evaluations": g.evaluations}
            for g in res.groups
        ],
    }
    report.append_jsonl(out / "design.jsonl", design)
    if cfg["plots"]:
        for k in test:
            plotting.safe(plotting.model_image, out / f"slice{k}_true.png", setup.grid,
                          model_to_velocity(setup.slices[k - 1]), title=f"slice {k}", label="c (km/s)")
    return {"ok": ok, "rows": rows, "design": design, "seconds": time.time() - t0}


def run_xval(cfg: dict, out: Path) -> dict:
    """Hold out each slice in turn; one metrics table per strategy over all splits."""
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    n = len(setup.slices)
    if n < 2:
        raise ValueError("cross validation needs at least two slices")
    table, ok = [], True
    for strategy in cfg["xval"]["strategies"]:
        for held in range(1, n + 1):
            train = [k for k in range(1, n + 1) if k != held]
            leg = run_bilevel(cfg, out / f"{strategy}_test{held}", train, [held], strategy, setup)
            if not leg["ok"]:
                ok = False
                table.append({"strategy": strategy, "testing": held, "error": leg.get("error")})
                continue
            for r in leg["rows"]:
                table.append({
                    "strategy": strategy, "testing": held, "slice": r.slice_id, "role": r.role,
                    "mre_start": r.mre_start, "mre_opt": r.mre_opt, "ssim_start": r.ssim_start,
                    "ssim_opt": r.ssim_opt, "IF": r.IF,
                })
    report.write_csv(out / "xval.csv", table)
    return {"ok": ok, "rows": table}


# ---------------------------------------------------------------- preconditioner benchmark


def _bench_sensors(points, P0: SensorSet) -> SensorSet:
    pts = P0.points.copy()
    for j, (x, z) in enumerate(points):
        if x is not None:
            pts[j, 0] = x
        if z is not None:
            pts[j, 1] = z
    return P0.with_points(pts)


def run_bench(cfg: dict, out: Path) -> dict:
    """PCG iteration counts on the rho-system with no, P1 and P2 preconditioning.

    For each ``alpha`` the reconstruction ``m_FWI(P0, alpha)`` of the bench
    slice is computed at the initial design ``P0``.  ``P1`` is the Hessian at
    that design itself; ``P1near`` and
    ``P1far`` are the Hessians at ``(m_FWI(P', alpha), P', alpha)`` for a
    reference design ``P'`` close to, respectively far from, ``P0``; ``P2``
    is ``Gamma(alpha, mu)``.
    """
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    bc = cfg["bench"]
    mu, tol = float(bc["mu"]), float(bc["pcg_tol"])
    k = int(bc["slice"])
    m_true = setup.slices[k - 1]
    freqs = tuple(bc["freqs_hz"])
    rec = SyntheticRecording(setup.grid, m_true, setup.sources, freqs, int(cfg["refine"]), float(cfg["amplitude"]))
    ops = Operators.build(setup.grid)
    P0 = setup.sensors
    near, far = _bench_sensors(bc["near"], P0), _bench_sensors(bc["far"], P0)
    lopts = lower_options(cfg)
    rows, start = [], setup.start
    warm = {}
    for alpha in bc["alphas"]:
        alpha = float(alpha)

        def solve(P):
            pb = FWIProblem(ops, rec.dataset(P, freqs), alpha, mu)
            r = lbfgs_minimize(pb, warm.get(id(P), start), lopts)
            warm[id(P)] = r.m
            return pb, r

        pb, r = solve(P0)
        op = HessianOperator(pb, r.evaluation)
        rhs = m_true - r.m
        x0 = np.ones_like(rhs)
        counts = {"alpha": alpha}
        counts["N_i"] = pcg_solve(op, rhs, None, tol, x0).iterations
        counts["N_i_P1"] = pcg_solve(op, rhs, build_P1(pb, r.evaluation), tol, x0).iterations
        for name, P in (("N_i_P1near", near), ("N_i_P1far", far)):
            pb1, r1 = solve(P)
            try:
                pre = build_P1(pb1, r1.evaluation)
            except ValueError as exc:
                # the reference reconstruction itself diverged; there is no P1 to build
                log.warning("bench alpha=%g: no %s (%s), count left empty", alpha, name, exc)
                warm.pop(id(P))
                counts[name] = None
                continue
            counts[name] = pcg_solve(op, rhs, pre, tol, x0).iterations
        counts["N_i_P2"] = pcg_solve(op, rhs, build_P2(setup.grid, alpha, mu), tol, x0).iterations
        counts["lower_grad_norm"] = r.grad_norm
        log.info("bench alpha=%g: %s", alpha, counts)
        rows.append(counts)
    cols = ["alpha", "N_i", "N_i_P1", "N_i_P1near", "N_i_P1far", "N_i_P2", "lower_grad_norm"]
    report.write_csv(out / "bench_precon.csv", rows, cols)
    if cfg["plots"]:
        a = [r["alpha"] for r in rows]
        plotting.safe(plotting.curves, out / "bench_precon.png",
                      {c: (a, [np.nan if r[c] is None else r[c] for r in rows]) for c in cols[1:6]}, xlabel="alpha", ylabel="PCG iterations")
    return {"ok": True, "rows": rows}


# ---------------------------------------------------------------- derivative checks


def run_gradcheck(cfg: dict, out: Path) -> dict:
    from .checks import run_all

    out.mkdir(parents=True, exist_ok=True)
    rows = run_all(cfg)
    report.write_csv(out / "gradcheck.csv", rows)
    for r in rows:
        log.info("%s", r)
    return {"ok": all(r["ok"] for r in rows), "rows": rows, "failed": [r["check"] for r in rows if not r["ok"]]}


# ---------------------------------------------------------------- frequency-continuation toy


@dataclass
class Toy:
    grid: Grid
    model: np.ndarray
    start: np.ndarray
    sources: np.ndarray
    sensor_x: float
    L: float

    def sensors(self, delta: float) -> SensorSet:
        """Three sensors on a vertical line, symmetric about the centre with spread ``delta``."""
        c, x = self.L / 2, self.sensor_x
        pts = [[x, c - delta / 2], [x, c], [x, c + delta / 2]]
        return SensorSet(pts, frozen=[[True, False], [True, True], [True, False]], lower=0.0, upper=self.L)

    def space(self, delta: float) -> DesignSpace:
        # free coordinates are z of sensors 0 and 2: z = L/2 -+ delta/2
        return DesignSpace(self.sensors(delta), True, False, tie=[[-0.5], [0.5]],
                           offset=[self.L / 2, self.L / 2], theta_bounds=[(0.0, self.L)])


def toy_problem(tc: dict) -> Toy:
    """Square of side ``L``, wavespeed 2 km/s plus Gaussian bumps of height ``dc``."""
    L = float(tc["L"])
    g = build_grid(int(tc["n"]), int(tc["n"]), L, L)
    c = np.full(g.M, 2.0)
    for cx, cz in tc["centres"]:
        c += float(tc["dc"]) * np.exp(-((g.x - cx * L) ** 2 + (g.z - cz * L) ** 2) / (2 * float(tc["sigma"]) ** 2))
    src = np.array([[float(tc["source_x"]), f * L] for f in (0.25, 0.5, 0.75)])
    return Toy(g, 1.0 / c**2, np.full(g.M, 0.25), src, L - float(tc["sensor_x_from_right"]), L)


def local_minima(values, prominence_rtol: float = 1e-6) -> list[int]:
    """Indices of local minima (interior or at either end) of a sampled curve.

    A dip counts only if it is deeper than ``prominence_rtol`` times the
    range of the curve, which screens out ripples at the level of the
    lower-level solver tolerance.
    """
    from scipy.signal import find_peaks

    v = np.asarray(values, dtype=float)
    span = float(v.max() - v.min())
    if span == 0.0:
        return [0]
    cap = v.max() + span
    padded = np.concatenate([[cap], v, [cap]])
    idx, _ = find_peaks(-padded, prominence=prominence_rtol * span)
    return [int(i) - 1 for i in idx]


def toy_scan(toy: Toy, tc: dict, freq: float, deltas, opts: UpperOptions) -> np.ndarray:
    """``psi`` over a sweep of ``delta``; each lower solve starts from ``m0``."""
    T = TrainingSet(toy.grid, [toy.model], toy.sources, [freq], int(tc["refine"]), float(tc["amplitude"]))
    ev = BilevelEvaluator(T, [freq], [toy.start], replace(opts, warm_start=False))
    return np.array([ev.evaluate(toy.sensors(d), float(tc["alpha"]), gradient=False).psi for d in deltas])


def toy_psi(toy: Toy, tc: dict, freq: float, delta: float, opts: UpperOptions) -> float:
    return float(toy_scan(toy, tc, freq, [delta], opts)[0])


def toy_optimise(toy: Toy, tc: dict, groups, delta0: float, opts: UpperOptions) -> tuple[float, list]:
    """Bilevel optimisation of ``delta`` through ``groups``; returns the final ``delta`` and group log."""
    freqs = sorted({f for g in groups for f in g})
    T = TrainingSet(toy.grid, [toy.model], toy.sources, freqs, int(tc["refine"]), float(tc["amplitude"]))
    delta, recon, log_rows = float(delta0), [toy.start], []
    for gid, group in enumerate(groups):
        P = toy.sensors(delta)
        res = optimise_group(T, P, float(tc["alpha"]), group, recon, toy.space(delta), opts, group_id=gid)
        pts = res.sensors.points
        delta = float(pts[2, 1] - pts[0, 1])
        recon = res.state.reconstructions
        log_rows.append({"group": gid, "freqs_hz": list(group), "delta": delta, "psi": res.state.psi,
                         "rule": res.rule, "iterations": res.iterations})
    return delta, log_rows


def toy_options(tc: dict) -> UpperOptions:
    lower = LBFGSOptions(gtol=1e-10, gtol_rel=float(tc["lower_gtol_rel"]), max_iter=int(tc["lower_max_iter"]),
                         approx_wolfe_rtol=1e-12)
    # every evaluation in a group starts from the group's starting models, so
    # psi is a function of the design alone, as in the cold scans
    return UpperOptions(lower=lower, mu=float(tc["mu"]), pgtol=float(tc["pgtol"]), max_iter=int(tc["max_iter"]),
                        preconditioner="P2", warm_start=False)


def run_toy(cfg: dict, out: Path) -> dict:
    """Dense ``delta``-scans at the low and high frequency, then continuation versus direct optimisation."""
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg["toy"]
    toy = toy_problem(tc)
    opts = toy_options(tc)
    lo, hi = float(tc["low_hz"]), float(tc["high_hz"])
    deltas = np.linspace(0.0, toy.L, int(tc["n_scan"]))
    t0 = time.time()
    scans = {}
    for f in (lo, hi):
        scans[f] = toy_scan(toy, tc, f, deltas, opts)
        log.info("toy scan at %g Hz done (%.0f s)", f, time.time() - t0)
    report.write_csv(out / "toy_scan.csv", [{"delta": d, f"psi_{lo}Hz": a, f"psi_{hi}Hz": b}
                                             for d, a, b in zip(deltas, scans[lo], scans[hi])])
    mins = {f: local_minima(scans[f], float(tc["prominence_rtol"])) for f in scans}
    i_best = int(np.argmin(scans[hi]))
    psi_best = float(scans[hi][i_best])
    delta0 = float(tc["delta0"])
    groups = [tuple(g) for g in tc["groups"]]
    d_cont, cont_log = toy_optimise(toy, tc, groups, delta0, opts)
    d_direct, direct_log = toy_optimise(toy, tc, [(hi,)], delta0, opts)
    psi_cont = toy_psi(toy, tc, hi, d_cont, opts)
    psi_direct = toy_psi(toy, tc, hi, d_direct, opts)
    summary = {
        "minima_low": [float(deltas[i]) for i in mins[lo]],
        "minima_high": [float(deltas[i]) for i in mins[hi]],
        "delta_best_high": float(deltas[i_best]), "psi_best_high": psi_best,
        "delta0": delta0, "delta_continuation": d_cont, "psi_continuation": psi_cont,
        "delta_direct": d_direct, "psi_direct": psi_direct,
        "continuation_rel_gap": psi_cont / psi_best - 1.0, "direct_ratio": psi_direct / psi_best,
        "continuation_log": cont_log, "direct_log": direct_log, "seconds": time.time() - t0,
    }
    summary["criteria"] = {
        "low_single_minimum": len(mins[lo]) == 1,
        "high_multiple_minima": len(mins[hi]) >= 2,
        "continuation_within_5pct": abs(summary["continuation_rel_gap"]) <= 0.05,
        "direct_at_least_2x": summary["direct_ratio"] >= 2.0,
    }
    report.append_jsonl(out / "toy.jsonl", summary)
    if cfg["plots"]:
        plotting.safe(plotting.curves, out / "toy_scan.png",
                      {f"{lo} Hz": (deltas, scans[lo]), f"{hi} Hz": (deltas, scans[hi])},
                      xlabel="delta (km)", ylabel="psi",
                      markers={"continuation": (d_cont, psi_cont), "direct": (d_direct, psi_direct)})
        plotting.safe(plotting.model_image, out / "toy_model.png", toy.grid, model_to_velocity(toy.model),
                      sources=toy.sources, sensors=toy.sensors(delta0).points, label="c (km/s)")
    summary["ok"] = True
    summary["scans"] = scans
    return summary
