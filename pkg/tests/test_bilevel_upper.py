import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilevel_fwi import SensorSet, build_grid, generate_data
from bilevel_fwi.bilevel_upper import (
    BilevelEvaluator,
    DesignSpace,
    FrequencySchedule,
    TrainingSet,
    UpperOptions,
    alpha_gradient,
    frequency_continuation,
    grad_psi_alpha,
    grad_psi_positions,
    optimise_group,
    position_gradient,
    predicted_solve_count,
    psi,
    psi_value,
    solve_rho,
    tau_field,
)
from bilevel_fwi.fwi_lower import FWIProblem, LBFGSOptions
from bilevel_fwi.harness.checks import accounting_check, small_problem, upper_gradient_fd, upper_instance
from bilevel_fwi.helmholtz import Operators
from bilevel_fwi.hessian_ops import HessianOperator

TIGHT = LBFGSOptions(gtol=1e-12, max_iter=20000, approx_wolfe_rtol=1e-12)


def test_predicted_solve_count():
    assert predicted_solve_count(2, 3, 4, 5) == 150
    assert predicted_solve_count(0, 3, 4, 5) == 0


def test_psi_value_examples():
    mp = np.array([1.0, 2.0, 3.0])
    assert psi_value([mp], [mp]) == 0.0
    assert psi_value([mp], [mp + np.array([0.0, 2.0, 0.0])]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        psi_value([], [])


def test_psi_regression_two_models():
    g, T, m0 = upper_instance(8, n_models=2)
    P = SensorSet([[0.85, 0.35], [0.8, 0.62]])
    value, _ = psi(P, 1e-3, T, [m0, m0], opts=UpperOptions(lower=TIGHT, warm_start=False))
    assert value == pytest.approx(0.18341506896425067, rel=1e-10)


def _exact_state():
    """Inverse-crime data evaluated at the true model: zero residual everywhere."""
    g = build_grid(7, 7, 1.0, 1.0)
    mp = 1.0 / (1.6 + 0.8 * g.z) ** 2
    P = SensorSet([[0.8, 0.3], [0.85, 0.7]])
    data = generate_data(g, mp, P, [1.0, 2.0], [[0.2, 0.5]], refine=1)
    pb = FWIProblem(g, data, alpha=1e-3, mu=1e-6)
    return g, mp, pb, pb.evaluate(mp)


def test_exact_lower_level_gives_zero_everything():
    g, mp, pb, ev = _exact_state()
    assert psi_value([mp], [ev.m]) == 0.0
    res = solve_rho(HessianOperator(pb, ev), mp - ev.m)
    assert not np.any(res.x) and res.n_products == 0
    tau = tau_field(pb, ev, res.x)
    assert not np.any(tau)
    slopes = np.zeros((1, 2, 2, 2))
    np.testing.assert_allclose(position_gradient(pb, ev, tau, obs_slopes=slopes), 0.0, atol=1e-14)
    assert alpha_gradient(pb, ev.m, res.x) == 0.0


def test_rho_diagonal_system():
    from bilevel_fwi import DataSet

    g = build_grid(5, 5, 1.0, 1.0)
    P = SensorSet([[0.5, 0.5]])
    data = DataSet(np.zeros((0, 2)), [1.0], P, np.zeros((0, 1, 1), complex))
    mu = 0.25
    pb = FWIProblem(g, data, alpha=0.0, mu=mu)
    ev = pb.evaluate(np.full(g.M, 0.3))
    rhs = np.random.default_rng(0).standard_normal(g.M)
    res = solve_rho(HessianOperator(pb, ev), rhs, tol=1e-14)
    np.testing.assert_allclose(res.x, rhs / mu, rtol=1e-12)


def test_rho_residual_small_instance():
    pb, m, rng = small_problem(8, 8, seed=3, alpha=1e-2, mu=1e-2)
    ev = pb.evaluate(m)
    op = HessianOperator(pb, ev)
    rhs = rng.standard_normal(op.M)
    res = solve_rho(op, rhs, tol=1e-14)
    assert np.linalg.norm(op.hvp(res.x) - rhs) <= 1e-12 * np.linalg.norm(rhs)


def test_tau_examples_and_direct_oracle():
    pb, m, rng = small_problem(8, 8, seed=4)
    ev = pb.evaluate(m)
    assert not np.any(tau_field(pb, ev, np.zeros(pb.grid.M)))
    rho = rng.standard_normal(pb.grid.M)
    t1 = tau_field(pb, ev, rho)
    np.testing.assert_allclose(tau_field(pb, ev, 2 * rho), 2 * t1, rtol=1e-13)
    # sum_k rho_k du/dm_k with du/dm_k = A^{-1}(c_k u_k e_k), one dense solve per node
    ops = Operators.build(pb.grid)
    for w, (omega, u) in enumerate(zip(pb.omegas, ev.u)):
        A = ops.system_matrix(m, omega).toarray()
        c = ops.g_coefficients(m, omega)
        Ainv = np.linalg.inv(A)
        for s in range(u.shape[1]):
            du_dm = Ainv * (c * u[:, s])[None, :]
            direct = du_dm @ rho
            assert np.abs(direct - t1[w, :, s]).max() <= 1e-10 * np.abs(direct).max()


def test_alpha_gradient_constant_reconstruction():
    pb, m, rng = small_problem(6, 6)
    assert alpha_gradient(pb, np.full(pb.grid.M, 0.3), rng.standard_normal(pb.grid.M)) == pytest.approx(0.0, abs=1e-12)


def test_upper_gradients_match_fd():
    rows = upper_gradient_fd(10)
    for r in rows:
        assert r["max_rel_err"] < 1e-3, r


def test_loose_lower_tolerance_degrades_fd():
    tight = max(r["max_rel_err"] for r in upper_gradient_fd(8))
    loose = max(r["max_rel_err"] for r in upper_gradient_fd(8, lower_gtol=1e-4))
    assert loose > 10 * tight


def test_mirror_symmetry_antisymmetric_gradient():
    # the point reflection (x, z) -> (L - x, L - z) maps every triangle of the
    # fixed-diagonal mesh onto another one, so the discrete problem is exactly symmetric
    g = build_grid(9, 9, 1.0, 1.0)

    def bump(x, z):
        return np.exp(-((x - 0.35) ** 2 + (z - 0.4) ** 2) / 0.02)

    mp = 1.0 / (2.0 + 0.2 * (bump(g.x, g.z) + bump(1 - g.x, 1 - g.z))) ** 2
    T = TrainingSet(g, [mp], [[0.2, 0.3], [0.8, 0.7]], [1.0], refine=2, amplitude=10.0)
    P = SensorSet([[0.7, 0.23], [0.3, 0.77]])
    opts = UpperOptions(lower=LBFGSOptions(gtol=1e-13, max_iter=20000, approx_wolfe_rtol=1e-12), warm_start=False)
    state = BilevelEvaluator(T, [1.0], [np.full(g.M, 0.25)], opts).evaluate(P, 1e-3)
    gp = grad_psi_positions(state)
    assert np.abs(gp[0] + gp[1]).max() <= 1e-8 * np.abs(gp).max()
    m = state.reconstructions[0]
    assert np.abs(m - m[::-1]).max() <= 1e-10


def test_accounting_matches_cost_model():
    r = accounting_check()
    assert r["ok"], r
    assert r["measured"] == r["predicted"] == predicted_solve_count(r["N_upper"], 4, 5, r["N_data"])


def test_fresh_solves_per_upper_iteration():
    g, T, m0 = upper_instance(8)
    P = SensorSet([[0.85, 0.35], [0.85, 0.62]], frozen=[[True, False], [True, False]])
    opts = UpperOptions(lower=LBFGSOptions(gtol=0.0, max_iter=2), pcg_tol=1e-30, pcg_maxiter=3)
    state = BilevelEvaluator(T, T.freqs_hz, [m0], opts).evaluate(P, 1e-3)
    n_data = len(T.sources) * len(T.freqs_hz)
    N_CG = state.ledger["N_CG"][0]
    assert N_CG == 4
    assert state.ledger["solves"]["cg"] + state.ledger["solves"]["tau"] == (2 * N_CG + 1) * n_data


def _bound_instance(z_upper):
    g, T, m0 = upper_instance(8)
    P = SensorSet([[0.85, 0.5], [0.8, z_upper]], frozen=[[True, True], [True, False]], lower=0.1, upper=z_upper)
    opts = UpperOptions(lower=TIGHT, warm_start=False, max_iter=3, pgtol=1e-8)
    return optimise_group(T, P, 1e-3, T.freqs_hz, [m0], DesignSpace(P), opts)


def test_bound_inward_gradient_leaves_bound():
    # at z = 0.4, d psi / dz > 0: the descent direction points into the box
    res = _bound_instance(0.4)
    assert res.sensors.points[1, 1] < 0.4 - 1e-6
    for h in res.history:
        assert 0.1 - 1e-12 <= h["sensors"][1][1] <= 0.4 + 1e-12


def test_bound_outward_gradient_stays_clamped():
    # at z = 0.8, d psi / dz < 0: descent would leave the box
    res = _bound_instance(0.8)
    assert res.sensors.points[1, 1] == pytest.approx(0.8)
    assert res.rule == "pgtol"


def test_stationary_start_zero_iterations():
    g, T, m0 = upper_instance(8)
    P = SensorSet([[0.85, 0.5], [0.8, 0.6]], frozen=[[True, True], [True, False]], lower=0.1, upper=0.9)
    opts = UpperOptions(lower=TIGHT, pgtol=1e3)
    res = optimise_group(T, P, 1e-3, T.freqs_hz, [m0], DesignSpace(P), opts)
    assert res.iterations == 0 and res.rule == "pgtol"
    np.testing.assert_array_equal(res.sensors.points, P.points)


def test_single_group_continuation_equals_group():
    g, T, m0 = upper_instance(8)
    P = SensorSet([[0.85, 0.4], [0.8, 0.6]], frozen=[[True, False], [True, False]], lower=0.1, upper=0.9)
    opts = UpperOptions(lower=TIGHT, max_iter=2, preconditioner="P2")
    sched = FrequencySchedule([(1.0, 2.0)])
    cont = frequency_continuation(T, sched, P, 1e-3, [m0], opts)
    from bilevel_fwi.hessian_ops import build_P2

    grp = optimise_group(T, P, 1e-3, (1.0, 2.0), [m0], DesignSpace(P, True, True), opts, P2=build_P2(g, 1e-3, opts.mu))
    np.testing.assert_array_equal(cont.sensors.points, grp.sensors.points)
    assert cont.alpha == grp.alpha
    np.testing.assert_array_equal(cont.reconstructions[0], grp.state.reconstructions[0])


def test_two_group_schedule():
    sched = FrequencySchedule([(0.5,), (0.5, 1.5), (1.5, 3), (3, 6)])
    assert sched.groups == ((0.5,), (0.5, 1.5), (1.5, 3.0), (3.0, 6.0))
    assert sched.optimise_alpha == (False, False, False, True)
    assert sched.frequencies == (0.5, 1.5, 3.0, 6.0)
    with pytest.raises(ValueError):
        FrequencySchedule([(3.0,), (0.5,)])
    with pytest.raises(ValueError):
        FrequencySchedule([()])


def test_group_log_written(tmp_path):
    g, T, m0 = upper_instance(8)
    P = SensorSet([[0.85, 0.4], [0.8, 0.6]], frozen=[[True, False], [True, False]], lower=0.1, upper=0.9)
    log = tmp_path / "upper.jsonl"
    opts = UpperOptions(lower=TIGHT, max_iter=2, log_path=str(log))
    sched = FrequencySchedule([(1.0,), (1.0, 2.0)])
    cont = frequency_continuation(T, sched, P, 1e-3, [m0], opts)
    from bilevel_fwi.harness.report import read_jsonl

    rows = read_jsonl(log)
    assert [r["freqs_hz"] for r in rows if "psi" in r][0] == [1.0]
    assert any(r.get("rule") for r in rows)
    assert len(cont.groups) == 2
    iters = [r for r in rows if "psi" in r and r["group"] == 0]
    assert all(b["psi"] <= a["psi"] * (1 + 1e-12) for a, b in zip(iters, iters[1:]))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0.1, 0.9), min_size=2, max_size=2), st.floats(-5, 5))
def test_design_space_round_trip(zs, log_alpha):
    P = SensorSet([[0.8, zs[0]], [0.8, zs[1]]], frozen=[[True, False], [True, False]], lower=0.1, upper=0.9)
    space = DesignSpace(P, True, True)
    theta = space.encode(P, np.exp(log_alpha))
    Q, a = space.decode(theta, P, 1.0)
    np.testing.assert_allclose(Q.points, P.points)
    assert a == pytest.approx(np.exp(log_alpha))
    g = space.gradient(np.array([1.0, 2.0]), 3.0, a)
    np.testing.assert_allclose(g, [1.0, 2.0, 3.0 * a])
    assert space.bounds()[:2] == [(0.1, 0.9), (0.1, 0.9)]


def test_tied_design_space():
    P = SensorSet([[0.9, 0.4], [0.9, 0.5], [0.9, 0.6]], frozen=[[True, False], [True, True], [True, False]])
    space = DesignSpace(P, True, False, tie=[[-0.5], [0.5]], offset=[0.5, 0.5], theta_bounds=[(0.0, 1.0)])
    theta = space.encode(P, 1.0)
    assert theta == pytest.approx([0.2])
    Q, _ = space.decode([0.6], P, 1.0)
    np.testing.assert_allclose(Q.points[:, 1], [0.2, 0.5, 0.8])
    assert space.gradient(np.array([1.0, 3.0]), 0.0, 1.0) == pytest.approx([1.0])
