import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from bilevel_fwi.grid_fem import (
    CORNER,
    EDGE,
    INTERIOR,
    assemble_regulariser,
    assemble_stiffness,
    build_grid,
    difference_matrix,
    laplacian_penalty,
    nodal_weights,
    prolong,
    triangles,
)


def test_smallest_grid():
    g = build_grid(2, 2, 1.0, 1.0)
    assert g.hx == g.hz == 1.0
    assert g.M == 4
    assert np.all(g.classification == CORNER)


def test_marmousi_spacing():
    g = build_grid(440, 121, 10.975, 3.0)
    assert g.hx == pytest.approx(0.025)
    assert g.hz == pytest.approx(0.025)


def test_3x2_classification():
    g = build_grid(3, 2, 1.0, 0.5)
    assert g.M == 6
    flags = g.classification
    assert np.sum(flags == CORNER) == 4
    assert np.sum(flags == EDGE) == 2
    assert np.sum(flags == INTERIOR) == 0


def test_bad_grid():
    with pytest.raises(ValueError):
        build_grid(1, 5, 1.0, 1.0)
    with pytest.raises(ValueError):
        build_grid(3, 3, 0.0, 1.0)


def test_node_order_z_fastest():
    g = build_grid(3, 4, 2.0, 3.0)
    k = g.index(2, 1)
    assert k == 2 * 4 + 1
    assert g.x[k] == pytest.approx(2.0) and g.z[k] == pytest.approx(1.0)
    img = g.as_image(np.arange(g.M))
    assert img.shape == (4, 3)
    assert img[1, 2] == k
    np.testing.assert_array_equal(g.from_image(img), np.arange(g.M))


def test_difference_matrix_examples():
    np.testing.assert_array_equal(difference_matrix(3).toarray(), 2 * np.array([[1, -1, 0], [0, 1, -1]]))
    np.testing.assert_array_equal(difference_matrix(2).toarray(), [[1, -1]])
    assert np.all(difference_matrix(5) @ np.full(5, 3.7) == 0)


def test_regulariser_e1():
    g = build_grid(2, 2, 1.0, 1.0)
    reg = assemble_regulariser(g, 1.0, 0.5)
    e1 = np.eye(4)[0]
    np.testing.assert_allclose(reg.apply(e1), [2.5, -1, -1, 0])
    np.testing.assert_allclose(reg.matrix @ e1, [2.5, -1, -1, 0])


def test_regulariser_constants_and_alpha_zero():
    rng = np.random.default_rng(0)
    g = build_grid(5, 7, 2.0, 1.0)
    reg = assemble_regulariser(g, 3.0, 1e-3)
    np.testing.assert_allclose(reg.apply(np.ones(g.M)), 1e-3 * np.ones(g.M), atol=1e-12)
    v = rng.standard_normal(g.M)
    np.testing.assert_allclose(assemble_regulariser(g, 0.0, 0.7).apply(v), 0.7 * v)


def test_regulariser_kronecker():
    g = build_grid(4, 3, 1.0, 1.0)
    Dx = np.kron(difference_matrix(4).toarray(), np.eye(3))
    Dz = np.kron(np.eye(4), difference_matrix(3).toarray())
    np.testing.assert_allclose(laplacian_penalty(g).toarray(), Dx.T @ Dx + Dz.T @ Dz)


def test_regulariser_rejects_bad_weights():
    g = build_grid(3, 3, 1.0, 1.0)
    with pytest.raises(ValueError):
        assemble_regulariser(g, 1.0, 0.0)
    with pytest.raises(ValueError):
        assemble_regulariser(g, -1.0, 1.0)


def test_gamma_spd():
    from scipy.linalg import cholesky
    from scipy.sparse.linalg import eigsh

    g = build_grid(6, 5, 1.0, 1.0)
    mu = 1e-6
    G = assemble_regulariser(g, 10.0, mu).matrix
    cholesky(G.toarray())
    lam = eigsh(G, k=1, which="SA", ncv=20, maxiter=20, tol=0, return_eigenvectors=False)
    assert lam[0] >= mu * (1 - 1e-8)


def test_laplacian_interior_rows_annihilate_x():
    g = build_grid(7, 6, 1.0, 1.0)
    out = laplacian_penalty(g) @ g.x
    i, j = g.ij(np.arange(g.M))
    inner = (i > 0) & (i < g.n1 - 1)
    np.testing.assert_allclose(out[inner], 0.0, atol=1e-12)


def _stiffness_oracle(g):
    """Element matrices from barycentric gradients, via a 3x3 inverse per triangle."""
    S = np.zeros((g.M, g.M))
    for t in triangles(g):
        V = np.column_stack([np.ones(3), g.x[t], g.z[t]])
        C = np.linalg.inv(V)  # columns: coefficients of each hat function
        grads = C[1:].T
        area = 0.5 * abs(np.linalg.det(V))
        S[np.ix_(t, t)] += area * grads @ grads.T
    return S


def test_stiffness_against_oracle():
    g = build_grid(4, 5, 1.5, 0.8)
    np.testing.assert_allclose(assemble_stiffness(g).toarray(), _stiffness_oracle(g), atol=1e-12)


def test_stiffness_kernel_and_interior_entry():
    g = build_grid(4, 4, 1.0, 1.0)
    S = assemble_stiffness(g)
    np.testing.assert_allclose(S @ np.ones(g.M), 0.0, atol=1e-12)
    k = g.index(1, 1)
    assert S[k, k] == pytest.approx(4.0)
    row = S[[k]].toarray().ravel()
    assert sorted(np.round(row[row != 0], 12)) == [-1, -1, -1, -1, 4]


def test_stiffness_psd():
    rng = np.random.default_rng(1)
    S = assemble_stiffness(build_grid(5, 5, 1.0, 1.0))
    assert np.allclose(S.toarray(), S.toarray().T)
    for v in rng.standard_normal((100, 25)):
        assert v @ (S @ v) >= -1e-12


def test_nodal_weights_examples():
    g = build_grid(5, 5, 0.1, 0.1)  # h = 0.025
    d, b = nodal_weights(g)
    k = g.index(2, 2)
    assert d[k] == pytest.approx(6.25e-4)
    assert b[k] == 0.0
    g2 = build_grid(3, 3, 1.0, 1.0)  # h = 0.5
    _, b2 = nodal_weights(g2)
    assert b2[g2.index(0, 1)] == pytest.approx(0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.floats(0.1, 20.0), st.floats(0.1, 20.0))
def test_nodal_weight_sums(n1, n2, wx, wz):
    g = build_grid(n1, n2, wx, wz)
    d, b = nodal_weights(g)
    assert d.sum() == pytest.approx(wx * wz, rel=1e-12)
    assert b.sum() == pytest.approx(2 * (wx + wz), rel=1e-12)
    assert np.all(b[~g.boundary] == 0)


def test_prolong_reproduces_bilinear():
    g = build_grid(4, 3, 2.0, 1.0)
    f = g.refined(3)
    lin = lambda x, z: 1.0 + 2.0 * x - z + 0.5 * x * z
    np.testing.assert_allclose(prolong(g, f, lin(g.x, g.z)), lin(f.x, f.z), atol=1e-12)
    with pytest.raises(ValueError):
        prolong(g, build_grid(4, 3, 1.0, 1.0), np.zeros(g.M))


def test_refined_grid():
    g = build_grid(5, 3, 1.0, 0.5).refined(2)
    assert (g.n1, g.n2) == (9, 5)
    assert sp.issparse(difference_matrix(3))
