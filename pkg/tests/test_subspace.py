import math

import numpy as np
import pytest
import scipy.sparse as sps
from hypothesis import given, strategies as st
from scipy.sparse.linalg import aslinearoperator

from vreml.errors import DimensionMismatch, InvalidConfig, NotPositiveDefiniteOnE
from vreml.subspace import ConstrainedOperator, constrained_inverse, make_basis, pseudo_log_det, trace_product

from conftest import dense_constrained_inverse


def spd_on_e(rng, n):
    """Random symmetric A with A 1 = 0, positive definite on E."""
    g = rng.standard_normal((n, n))
    c = np.eye(n) - np.full((n, n), 1.0 / n)
    return c @ (g @ g.T + n * np.eye(n)) @ c


def test_basis_n2():
    h = make_basis(2).columns
    np.testing.assert_allclose(h[:, 0], [1 / math.sqrt(2), -1 / math.sqrt(2)], atol=1e-15)


@pytest.mark.parametrize("kind", ["helmert", "eigen"])
@pytest.mark.parametrize("n", [2, 3, 10, 57])
def test_basis_orthonormal_and_sum_to_zero(n, kind):
    h = make_basis(n, kind).columns
    assert h.shape == (n, n - 1)
    np.testing.assert_allclose(h.T @ h, np.eye(n - 1), atol=1e-12)
    assert np.linalg.norm(h.T @ np.ones(n)) < 1e-12
    # fixed sign convention
    for j in range(n - 1):
        first = h[np.flatnonzero(np.abs(h[:, j]) > 1e-12)[0], j]
        assert first > 0


def test_basis_is_deterministic():
    np.testing.assert_array_equal(make_basis(30).columns, make_basis(30).columns)


def test_basis_rejects_small_n():
    with pytest.raises(InvalidConfig):
        make_basis(1)
    with pytest.raises(InvalidConfig):
        make_basis(4, "qr")


def test_centring_matrix_is_its_own_constrained_inverse():
    n = 7
    c = np.eye(n) - np.full((n, n), 1.0 / n)
    op = constrained_inverse(c, make_basis(n))
    np.testing.assert_allclose(op.dense(), c, atol=1e-13)
    assert pseudo_log_det(op) == pytest.approx(0.0, abs=1e-13)


def test_single_edge_laplacian_inverse():
    lap = np.array([[1.0, -1.0], [-1.0, 1.0]])
    op = constrained_inverse(lap, make_basis(2))
    np.testing.assert_allclose(op.dense(), [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)
    assert pseudo_log_det(op) == pytest.approx(math.log(0.5), abs=1e-14)


def test_random_inverse_matches_eigendecomposition(rng):
    n = 20
    a = spd_on_e(rng, n)
    op = constrained_inverse(a, make_basis(n))
    sigma, w = dense_constrained_inverse(a)
    np.testing.assert_allclose(op.dense(), sigma, atol=1e-10)
    assert pseudo_log_det(op) == pytest.approx(-np.sum(np.log(w)), abs=1e-10)


def test_trace_product_examples(rng):
    n = 20
    a = spd_on_e(rng, n)
    op = constrained_inverse(a, make_basis(n))
    assert trace_product(op, a) == pytest.approx(n - 1, rel=1e-12)
    assert trace_product(op, np.zeros((n, n))) == 0.0
    m = rng.standard_normal((n, n))
    m = m + m.T
    assert trace_product(op, m) == pytest.approx(np.trace(m @ op.dense()), abs=1e-10)


def test_operator_inputs_agree(rng):
    n = 12
    a = spd_on_e(rng, n)
    basis = make_basis(n)
    dense = basis.restrict_operator(a)
    np.testing.assert_allclose(basis.restrict_operator(sps.csr_matrix(a)), dense, atol=1e-13)
    np.testing.assert_allclose(basis.restrict_operator(aslinearoperator(a)), dense, atol=1e-13)
    with pytest.raises(DimensionMismatch):
        basis.restrict_operator(np.eye(n + 1))


def test_not_positive_definite_on_e():
    n = 5
    with pytest.raises(NotPositiveDefiniteOnE):
        constrained_inverse(np.zeros((n, n)), make_basis(n))
    with pytest.raises(NotPositiveDefiniteOnE):
        constrained_inverse(-np.eye(n), make_basis(n))
    with pytest.raises(DimensionMismatch):
        ConstrainedOperator(np.eye(3), make_basis(5))


@given(n=st.integers(2, 40), seed=st.integers(0, 2**32 - 1))
def test_solve_inverts_on_e(n, seed):
    rng = np.random.default_rng(seed)
    a = spd_on_e(rng, n)
    op = constrained_inverse(a, make_basis(n))
    b = rng.standard_normal(n)
    b -= b.mean()
    x = op.solve(b)
    assert abs(x.sum()) < 1e-10 * (1 + np.abs(x).max())
    assert np.linalg.norm(a @ x - b) <= 1e-8 * np.linalg.norm(b)
    sigma = op.dense()
    np.testing.assert_allclose(sigma, sigma.T, atol=1e-10)
    assert np.abs(sigma @ np.ones(n)).max() < 1e-10 * (1 + np.abs(sigma).max())


@given(n=st.integers(2, 50), seed=st.integers(0, 2**32 - 1))
def test_pseudo_log_det_basis_invariant(n, seed):
    rng = np.random.default_rng(seed)
    a = spd_on_e(rng, n)
    helmert = constrained_inverse(a, make_basis(n, "helmert"))
    eigen = constrained_inverse(a, make_basis(n, "eigen"))
    assert pseudo_log_det(helmert) == pytest.approx(pseudo_log_det(eigen), abs=1e-8)
    np.testing.assert_allclose(helmert.dense(), eigen.dense(), atol=1e-8)


@given(n=st.integers(2, 30), seed=st.integers(0, 2**32 - 1), a1=st.floats(-5, 5), a2=st.floats(-5, 5))
def test_trace_product_linear(n, seed, a1, a2):
    rng = np.random.default_rng(seed)
    op = constrained_inverse(spd_on_e(rng, n), make_basis(n))
    m1, m2 = (lambda g: g + g.T)(rng.standard_normal((n, n))), (lambda g: g + g.T)(rng.standard_normal((n, n)))
    lhs = trace_product(op, a1 * m1 + a2 * m2)
    rhs = a1 * trace_product(op, m1) + a2 * trace_product(op, m2)
    assert lhs == pytest.approx(rhs, abs=1e-10 * (1 + abs(lhs)))
