import numpy as np
import pytest

from phsvds.errors import ContractError, FactorizationError, RefusedError
from phsvds.operators import (ILU0, MatvecCounter, augmented_operator, identity_preconditioner,
                              jacobi_preconditioners, normal_operator, precond_for_B_from_M,
                              precond_for_C_from_M, shift_invert_operator)
from phsvds.sparse import SparseMatrix


def _random(m, n, seed, density=1.0):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((m, n)) * (rng.random((m, n)) < density)
    return d, SparseMatrix.from_dense(d)


def test_normal_operator_diag():
    op = normal_operator(SparseMatrix.diag([3.0, 4.0]))
    np.testing.assert_array_equal(op.matvec(np.array([1.0, 0.0])), [9.0, 0.0])


def test_normal_operator_orthonormal_columns_is_identity():
    Q = np.linalg.qr(np.random.default_rng(0).standard_normal((9, 4)))[0]
    op = normal_operator(SparseMatrix.from_dense(Q))
    np.testing.assert_allclose(op.to_dense(), np.eye(4), atol=1e-15)


def test_normal_operator_random_and_wide():
    d, A = _random(25, 18, 1, 0.4)
    x = np.random.default_rng(2).standard_normal(18)
    np.testing.assert_allclose(normal_operator(A).matvec(x), d.T @ (d @ x), rtol=1e-13, atol=1e-13)
    op = normal_operator(A.T)
    assert op.shape == (18, 18) and op.transposed


def test_augmented_operator_small():
    op = augmented_operator(SparseMatrix.from_dense(np.array([[2.0]])))
    np.testing.assert_array_equal(op.matvec(np.array([1.0, 1.0])), [2.0, 2.0])


def test_augmented_spectrum_is_plus_minus_sigma_and_zeros():
    d, A = _random(9, 6, 3)
    lam = np.linalg.eigvalsh(augmented_operator(A).to_dense())
    s = np.linalg.svd(d, compute_uv=False)
    expect = np.sort(np.concatenate([s, -s, np.zeros(3)]))
    np.testing.assert_allclose(lam, expect, atol=1e-13 * s[0])


def test_counter_counts_products_with_A():
    c = MatvecCounter()
    _, A = _random(5, 4, 4)
    normal_operator(A, counter=c).matvec(np.ones(4))
    augmented_operator(A, counter=c).matvec(np.ones(9))
    assert c.count == 2
    with pytest.raises(ContractError):
        normal_operator(A).matvec(np.ones(5))


def test_preconditioner_identity_and_exact():
    x = np.arange(4.0)
    np.testing.assert_array_equal(identity_preconditioner(4)(x), x)
    d, A = _random(4, 4, 5)
    Minv = np.linalg.inv(d)
    pc = precond_for_C_from_M(lambda y: Minv @ y, lambda y: Minv.T @ y, 4)
    lam = np.linalg.eigvals(np.column_stack([pc(c) for c in (d.T @ d)]))
    np.testing.assert_allclose(np.sort(lam.real), np.ones(4), atol=1e-10)
    pb = precond_for_B_from_M(lambda y: Minv @ y, lambda y: Minv.T @ y, 4)
    Bd = augmented_operator(A).to_dense()
    PB = np.column_stack([pb(c) for c in np.eye(8)])
    np.testing.assert_allclose(PB @ Bd, np.eye(8), atol=1e-10)


def test_jacobi_preconditioners_square_and_rectangular():
    A = SparseMatrix.diag([2.0, 4.0])
    pc, pb = jacobi_preconditioners(A)
    np.testing.assert_allclose(pc(np.ones(2)), [0.25, 1.0 / 16.0])
    np.testing.assert_allclose(pb(np.array([1.0, 1.0, 0.0, 0.0])), [0.0, 0.0, 0.5, 0.25])
    d, R = _random(6, 3, 6)
    pc, pb = jacobi_preconditioners(R)
    np.testing.assert_allclose(pc(np.ones(3)), 1.0 / (d ** 2).sum(axis=0))
    assert pb.dim == 9


def test_ilu0_exact_on_lower_triangular_and_tridiagonal():
    L = np.tril(np.random.default_rng(7).standard_normal((5, 5))) + 4 * np.eye(5)
    f = ILU0(SparseMatrix.from_dense(L))
    np.testing.assert_allclose(f.L.to_dense() @ f.U.to_dense(), L, atol=1e-14)
    T = 4 * np.eye(5) - np.eye(5, k=1) - np.eye(5, k=-1)
    f = ILU0(SparseMatrix.from_dense(T))
    np.testing.assert_allclose(f.L.to_dense() @ f.U.to_dense(), T, atol=1e-14)
    b = np.arange(1.0, 6.0)
    np.testing.assert_allclose(f.solve(b), np.linalg.solve(T, b), atol=1e-14)
    np.testing.assert_allclose(f.solve_t(b), np.linalg.solve(T.T, b), atol=1e-14)


def test_ilu0_zero_pivot():
    with pytest.raises(FactorizationError):
        ILU0(SparseMatrix.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]])))
    with pytest.raises(ContractError):
        ILU0(SparseMatrix.from_dense(np.ones((2, 3))))


def test_shift_invert_qr_mode():
    op = shift_invert_operator(SparseMatrix.diag([2.0, 5.0]), mode="qr_of_A")
    np.testing.assert_allclose(op.matvec(np.array([1.0, 0.0])), [0.25, 0.0], atol=1e-16)
    np.testing.assert_allclose(op.to_singular([0.25]), [2.0])
    assert op.A_norm == pytest.approx(5.0)


def test_shift_invert_lu_mode():
    op = shift_invert_operator(SparseMatrix.diag([2.0, 5.0]), mode="lu_of_B")
    np.testing.assert_allclose(op.matvec(np.array([1.0, 0.0, 0.0, 0.0])), [0, 0, 0.5, 0],
                               atol=1e-16)
    with pytest.raises(FactorizationError):
        shift_invert_operator(SparseMatrix.from_dense(np.ones((3, 2)) + np.eye(3, 2)),
                              mode="lu_of_B")


def test_shift_invert_refusals():
    A = SparseMatrix.diag(np.ones(10))
    with pytest.raises(RefusedError):
        shift_invert_operator(A, threshold=5)
    with pytest.raises(ContractError):
        shift_invert_operator(A, mode="qr_of_A", shift=1.0)
    with pytest.raises(FactorizationError):
        shift_invert_operator(SparseMatrix.diag([1.0, 0.0]), mode="qr_of_A")
