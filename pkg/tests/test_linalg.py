import numpy as np
import pytest
from core.errors import NotPositiveDefinite, ShapeAssumptionViolated, StackedRankDeficient
from core.linalg_utils import (BlockDiagonalCovariance, CovarianceStructures, gsvd_pair, inv_sqrt_spd,
                               numerical_rank, pseudoinverse, solve_spd, spd_factor, spd_logdet)


def _spd(rng, k):
    A = rng.normal(size=(k, k))
    return A @ A.T + k * np.eye(k)


# ------------
# spd helpers
# ------------
def test_solve_and_logdet(rng):
    A = _spd(rng, 6)
    b = rng.normal(size=(6, 2))
    np.testing.assert_allclose(A @ solve_spd(A, b), b, atol=1e-10)
    assert spd_logdet(spd_factor(A)) == pytest.approx(np.linalg.slogdet(A)[1], rel=1e-12)
    assert solve_spd(np.zeros((0, 0)), np.zeros((0, 3))).shape == (0, 3)


def test_not_positive_definite(rng):
    with pytest.raises(NotPositiveDefinite):
        spd_factor(-np.eye(3))
    with pytest.raises(NotPositiveDefinite):
        spd_factor(rng.normal(size=(3, 3)) + 10 * np.eye(3) + np.triu(np.ones((3, 3)), 1))
    with pytest.raises(NotPositiveDefinite):
        inv_sqrt_spd(np.diag([1.0, 0.0]))


def test_pseudoinverse_and_rank(rng):
    A = rng.normal(size=(5, 2)) @ rng.normal(size=(2, 4))
    assert numerical_rank(A) == 2
    Ap = pseudoinverse(A)
    np.testing.assert_allclose(A @ Ap @ A, A, atol=1e-10)
    np.testing.assert_array_equal(pseudoinverse(np.zeros((3, 2))), np.zeros((2, 3)))


def test_inverse_square_root(rng):
    A = _spd(rng, 5)
    S = inv_sqrt_spd(A)
    np.testing.assert_allclose(S @ A @ S, np.eye(5), atol=1e-10)


# ------------
# gsvd
# ------------
@pytest.mark.parametrize("n,m,p", [(4, 6, 6), (6, 6, 10), (3, 5, 7), (5, 8, 8)])
def test_gsvd_reconstruction(rng, n, m, p):
    A, B = rng.normal(size=(n, p)), rng.normal(size=(m, p))
    gf = gsvd_pair(A, B)
    A_hat, B_hat = gf.reconstruct()
    assert np.linalg.norm(A_hat - A) < 1e-10 * np.linalg.norm(A)
    assert np.linalg.norm(B_hat - B) < 1e-10 * np.linalg.norm(B)
    np.testing.assert_allclose(gf.alpha ** 2 + gf.beta ** 2, 1.0, atol=1e-12)
    np.testing.assert_allclose(gf.U.T @ gf.U, np.eye(n), atol=1e-12)
    np.testing.assert_allclose(gf.Vmat.T @ gf.Vmat, np.eye(m), atol=1e-12)
    assert np.all(np.diff(gf.alpha) >= -1e-14)
    assert gf.ell == n + m - p


def test_gsvd_matches_quotient_svd(rng):
    """B invertible: sigma/mu are the singular values of A B^-1"""
    A, B = rng.normal(size=(4, 6)), _spd(rng, 6)
    gf = gsvd_pair(A, B)
    ratios = np.sort(gf.sigma / gf.mu)
    expected = np.sort(np.linalg.svd(A @ np.linalg.inv(B), compute_uv=False))
    np.testing.assert_allclose(ratios, expected, rtol=1e-9)
    assert gf.null_dim == 0


def test_gsvd_null_space_of_b(rng):
    A = rng.normal(size=(5, 6))
    B = np.diff(np.eye(6), 2, axis=0)
    gf = gsvd_pair(A, B)
    assert gf.null_dim == 2
    np.testing.assert_allclose(B @ gf.G[:, -2:], 0.0, atol=1e-10)


def test_gsvd_shape_and_rank_errors(rng):
    with pytest.raises(ShapeAssumptionViolated):
        gsvd_pair(rng.normal(size=(2, 8)), rng.normal(size=(3, 8)))
    with pytest.raises(ShapeAssumptionViolated):
        gsvd_pair(rng.normal(size=(2, 4)), rng.normal(size=(3, 5)))
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    A[:, -1] = 0.0
    B[:, -1] = 0.0
    with pytest.raises(StackedRankDeficient):
        gsvd_pair(A, B)


# ------------
# block-diagonal V and Woodbury
# ------------
def _unbalanced_v(rng):
    subject_index = np.array([0, 0, 0, 1, 1, 2, 2, 2, 3])
    z_rows = np.column_stack([np.ones(9), rng.normal(size=9)])
    Sigma_b = np.array([[0.5, 0.1], [0.1, 0.3]])
    v = BlockDiagonalCovariance(z_rows, subject_index, 0.7, Sigma_b)
    Z = np.zeros((9, 8))
    for j in range(2):
        Z[np.arange(9), subject_index * 2 + j] = z_rows[:, j]
    return v, Z @ np.kron(np.eye(4), Sigma_b) @ Z.T + 0.7 * np.eye(9)


def test_block_diagonal_covariance(rng):
    v, V = _unbalanced_v(rng)
    np.testing.assert_allclose(v.dense(), V, atol=1e-12)
    M = rng.normal(size=(9, 3))
    np.testing.assert_allclose(v.solve(M), np.linalg.solve(V, M), atol=1e-10)
    assert v.logdet == pytest.approx(np.linalg.slogdet(V)[1], rel=1e-12)
    assert v.solve(np.zeros((9, 0))).shape == (9, 0)


def test_woodbury_matches_dense(rng):
    v, V = _unbalanced_v(rng)
    W = rng.normal(size=(9, 4))
    gram = _spd(rng, 4)
    cs = CovarianceStructures(v, W, gram)
    V1 = V + W @ np.linalg.inv(gram) @ W.T
    np.testing.assert_allclose(cs.V1(np.linalg.inv(gram)), V1, atol=1e-10)
    M = rng.normal(size=(9, 2))
    np.testing.assert_allclose(cs.solve_v1(M), np.linalg.solve(V1, M), atol=1e-10)
    assert cs.logdet_v1(np.linalg.slogdet(gram)[1]) == pytest.approx(np.linalg.slogdet(V1)[1], rel=1e-10)
    # push-through identity
    np.testing.assert_allclose(cs.push_through(M), np.linalg.inv(gram) @ W.T @ np.linalg.solve(V1, M), atol=1e-10)
