import numpy as np
import pytest

from bilevel_fwi import DataSet, SensorSet, SyntheticRecording, add_noise, build_grid, generate_data
from bilevel_fwi.fwi_lower import FWIProblem


def _layered(g):
    return 1.0 / (1.5 + 0.5 * g.z) ** 2


P = SensorSet([[0.8, 0.3], [0.8, 0.7], [0.9, 0.5]])
SRC = [[0.2, 0.4], [0.2, 0.6]]


def test_inverse_crime_control():
    g = build_grid(8, 8, 1.0, 1.0)
    m = _layered(g)
    data = generate_data(g, m, P, [1.0, 2.0], SRC, refine=1)
    ev = FWIProblem(g, data, alpha=0.0, mu=1e-12).evaluate(m, gradient=False)
    assert ev.misfit <= 1e-24 * max(1.0, np.sum(np.abs(data.readings) ** 2))


def test_richardson_refinement():
    g = build_grid(6, 6, 1.0, 1.0)
    m = _layered(g)
    d = {r: generate_data(g, m, P, [1.0], SRC, refine=r).readings for r in (2, 4, 8)}
    ratio = np.abs(d[2] - d[4]).max() / np.abs(d[4] - d[8]).max()
    assert 3.2 <= ratio <= 4.8


def test_sources_are_independent_rows():
    g = build_grid(7, 7, 1.0, 1.0)
    m = _layered(g)
    both = generate_data(g, m, P, [1.5], SRC).readings
    for s, src in enumerate(SRC):
        one = generate_data(g, m, P, [1.5], [src]).readings
        np.testing.assert_allclose(both[s], one[0], rtol=1e-13)


def test_recording_reused_for_any_sensors():
    g = build_grid(7, 7, 1.0, 1.0)
    rec = SyntheticRecording(g, _layered(g), SRC, [0.5, 1.5], refine=2, amplitude=3.0)
    Q = SensorSet([[0.7, 0.2]])
    ds = rec.dataset(Q, [1.5])
    direct = generate_data(g, _layered(g), Q, [1.5], SRC, refine=2, amplitude=3.0)
    np.testing.assert_allclose(ds.readings, direct.readings)
    assert ds.readings.shape == (2, 1, 1)
    assert ds.slopes.shape == (2, 1, 1, 2)
    with pytest.raises(KeyError):
        rec.dataset(Q, [3.0])


def test_dataset_shape_checked():
    with pytest.raises(ValueError):
        DataSet([[0.1, 0.1]], [1.0], P, np.zeros((1, 1, 2), complex))


def _big_dataset(n=20000, seed=0):
    rng = np.random.default_rng(seed)
    Q = SensorSet(rng.random((n, 2)))
    readings = (rng.standard_normal((1, 1, n)) + 1j * rng.standard_normal((1, 1, n))) * 5.0
    return DataSet([[0.5, 0.5]], [1.0], Q, readings)


def test_noise_40db_is_one_percent():
    data = _big_dataset()
    noisy = add_noise(data, 40.0, seed=1)
    ratio = np.sqrt(np.mean(np.abs(noisy.readings - data.readings) ** 2) / np.mean(np.abs(data.readings) ** 2))
    assert ratio == pytest.approx(0.01, abs=1e-3)


def test_noise_infinite_and_determinism():
    data = _big_dataset(100)
    assert add_noise(data, np.inf) is data
    a, b = add_noise(data, 20.0, seed=7), add_noise(data, 20.0, seed=7)
    np.testing.assert_array_equal(a.readings, b.readings)
    assert not np.array_equal(a.readings, add_noise(data, 20.0, seed=8).readings)
    with pytest.raises(ValueError):
        add_noise(data, np.nan)
