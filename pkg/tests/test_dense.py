import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phsvds.dense import (dense_svd, dense_sym_eig, jacobi_eigh, jacobi_svd, orthonormalize,
                          qr_append_column, qr_factor)
from phsvds.errors import ContractError, RankDeficiencyError


def test_sym_eig_trivial():
    np.testing.assert_array_equal(dense_sym_eig(np.diag([2.0, 1.0]))[0], [1.0, 2.0])
    np.testing.assert_allclose(dense_sym_eig(np.array([[0.0, 1.0], [1.0, 0.0]]))[0], [-1, 1],
                               atol=1e-15)
    with pytest.raises(ContractError):
        dense_sym_eig(np.ones((2, 3)))
    with pytest.raises(ContractError):
        dense_sym_eig(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_sym_eig_matches_jacobi_oracle():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((12, 12))
    H = X + X.T
    lam, S = dense_sym_eig(H)
    lj, Sj = jacobi_eigh(H, tol=1e-15)
    np.testing.assert_allclose(lam, lj, rtol=0, atol=1e-12)
    np.testing.assert_allclose(S.T @ S, np.eye(12), atol=1e-13)
    np.testing.assert_allclose(H @ S, S * lam, atol=1e-12)


def test_svd_trivial():
    np.testing.assert_array_equal(dense_svd(np.diag([5.0, 2.0]))[1], [2.0, 5.0])
    np.testing.assert_array_equal(dense_svd(np.zeros((3, 2)))[1], [0.0, 0.0])


def test_svd_normal_equations_cross_check():
    rng = np.random.default_rng(1)
    R = rng.standard_normal((10, 7))
    U, s, V = dense_svd(R)
    lam, _ = dense_sym_eig(R.T @ R)
    scale = np.linalg.norm(R, 2) ** 2
    assert np.max(np.abs(s ** 2 - lam)) <= 1e-12 * scale
    np.testing.assert_allclose((U * s) @ V.T, R, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_jacobi_svd_agrees_with_lapack(m, n, seed):
    R = np.random.default_rng(seed).standard_normal((m, n))
    U, s, V = jacobi_svd(R)
    ref = np.linalg.svd(R, compute_uv=False)[::-1]
    norm = max(ref[-1], 1e-300)
    assert np.max(np.abs(s - ref)) <= 1e-13 * norm
    np.testing.assert_allclose((U * s) @ V.T, R, atol=1e-12 * norm)


def test_jacobi_handles_wide_dynamic_range():
    # column norm products near the overflow limit must not produce NaN
    R = np.diag([1e-150, 1.0, 1e150])
    R[0, 2] = 1e140
    with np.errstate(over="raise", invalid="raise"):
        _, s, _ = jacobi_svd(R)
    ref = np.linalg.svd(R, compute_uv=False)[::-1]
    np.testing.assert_allclose(s, ref, rtol=1e-14)


def test_qr_append_trivial():
    Q, R = qr_append_column(np.array([[1.0], [0.0]]), np.array([[1.0]]), np.array([0.0, 1.0]))
    np.testing.assert_array_equal(Q, np.eye(2))
    np.testing.assert_array_equal(R, np.eye(2))


def test_qr_append_sequence_matches_full_factorization():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((30, 8))
    Q, R = np.zeros((30, 0)), np.zeros((0, 0))
    for j in range(8):
        Q, R = qr_append_column(Q, R, W[:, j])
    Qf, Rf = qr_factor(W)
    np.testing.assert_allclose(Q @ R, Qf @ Rf, atol=1e-12)
    np.testing.assert_allclose(Q @ R, W, atol=1e-12)
    np.testing.assert_allclose(np.abs(R), np.abs(np.linalg.qr(W)[1]), atol=1e-12)


def test_qr_append_rank_deficiency():
    Q, R = qr_factor(np.random.default_rng(3).standard_normal((6, 2)))
    with pytest.raises(RankDeficiencyError):
        qr_append_column(Q, R, Q[:, 0])
    Q2, R2 = qr_append_column(Q, R, Q[:, 0], complete=True)
    assert R2[2, 2] == 0.0
    np.testing.assert_allclose(Q2.T @ Q2, np.eye(3), atol=1e-14)


def test_orthonormalize_drops_dependent_columns():
    rng = np.random.default_rng(4)
    base = np.linalg.qr(rng.standard_normal((10, 2)))[0]
    X = np.column_stack([rng.standard_normal(10), base[:, 0] * 3.0, rng.standard_normal(10)])
    Q, kept = orthonormalize(X, against=base)
    assert kept == [0, 2]
    np.testing.assert_allclose(Q.T @ Q, np.eye(2), atol=1e-14)
    assert np.max(np.abs(base.T @ Q)) <= 1e-14
