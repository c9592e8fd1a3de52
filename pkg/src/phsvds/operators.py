"""Linear operators built from a sparse matrix ``A``.

Vectors in the augmented space are ordered ``[v; u]``: the right (length n)
block first, then the left (length m) block.  Every operator that touches
``A`` reports its cost in products with ``A`` (one ``A`` and one ``A^T``
product count as one "MV"), so solver accounting does not depend on how the
operators are wrapped.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .dense import EPS
from .errors import ContractError, FactorizationError, RefusedError
from .sparse import SparseMatrix, spmv, spmv_t

DENSE_THRESHOLD = 5000


class MatvecCounter:
    """Mutable tally of products with ``A`` shared by the operators of a solve."""

    def __init__(self):
        self.count = 0

    def add(self, n=1):
        self.count += n

    def __repr__(self):
        return f"MatvecCounter({self.count})"


class LinearOperator:
    """A square or rectangular ``apply`` contract with matvec accounting."""

    def __init__(self, dim_out, dim_in, apply, *, symmetric=False, matvec_cost=0,
                 counter=None, name="op"):
        self.dim_out = int(dim_out)
        self.dim_in = int(dim_in)
        self._apply = apply
        self.is_symmetric = symmetric
        self.matvec_cost = matvec_cost
        self.counter = counter if counter is not None else MatvecCounter()
        self.name = name
        self.applies = 0

    @property
    def shape(self):
        return (self.dim_out, self.dim_in)

    def matvec(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.dim_in:
            raise ContractError(f"{self.name}: expected length {self.dim_in}, got {x.shape[0]}")
        k = 1 if x.ndim == 1 else x.shape[1]
        self.applies += k
        self.counter.add(k * self.matvec_cost)
        return self._apply(x)

    __call__ = matvec

    def to_dense(self):
        """Assemble the operator column by column (for tests and tiny problems)."""
        save = self.applies, self.counter.count
        out = np.column_stack([self._apply(e) for e in np.eye(self.dim_in)])
        self.applies, self.counter.count = save
        return out

    def __repr__(self):
        return f"<{self.name} {self.dim_out}x{self.dim_in}>"


@dataclass
class Preconditioner:
    apply: Callable
    target: str  # "for_C" or "for_B"
    description: str
    dim: int

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.dim:
            raise ContractError(f"preconditioner expects length {self.dim}, got {x.shape[0]}")
        return self.apply(x)


def identity_preconditioner(dim, target="for_C"):
    return Preconditioner(lambda x: np.array(x, dtype=np.float64), target, "identity", dim)


def oriented(A: SparseMatrix):
    """Return ``(A', transposed)`` with ``A'`` tall (nrows >= ncols)."""
    if A.nrows < A.ncols:
        return A.T, True
    return A, False


def normal_operator(A: SparseMatrix, counter=None) -> LinearOperator:
    """``C = A^T A`` applied as two sparse products (never formed).

    Wide inputs are transposed first so the dimension is ``min(m, n)``.
    """
    B, transposed = oriented(A)

    def apply(x):
        return spmv_t(B, spmv(B, x))

    op = LinearOperator(B.ncols, B.ncols, apply, symmetric=True, matvec_cost=1,
                        counter=counter, name="C")
    op.matrix = B
    op.transposed = transposed
    return op


def augmented_operator(A: SparseMatrix, counter=None) -> LinearOperator:
    """``B = [0 A^T; A 0]`` acting on ``[v; u]``."""
    m, n = A.shape

    def apply(x):
        if x.ndim == 1:
            return np.concatenate([spmv_t(A, x[n:]), spmv(A, x[:n])])
        return np.vstack([spmv_t(A, x[n:]), spmv(A, x[:n])])

    op = LinearOperator(m + n, m + n, apply, symmetric=True, matvec_cost=1,
                        counter=counter, name="B")
    op.matrix = A
    return op


# ------------------------------------------------------------------ preconditioners

def precond_for_C_from_M(M_inv, M_inv_t, dim) -> Preconditioner:
    """``M^{-1} M^{-T}`` for the normal equations, given ``M ~ A`` (square)."""
    return Preconditioner(lambda x: M_inv(M_inv_t(x)), "for_C", "M^-1 M^-T", dim)


def precond_for_B_from_M(M_inv, M_inv_t, dim) -> Preconditioner:
    """``[0 M^{-1}; M^{-T} 0]`` on ``[v; u]``; ``dim`` is the order of ``M``."""

    def apply(x):
        return np.concatenate([M_inv(x[dim:]), M_inv_t(x[:dim])])

    return Preconditioner(apply, "for_B", "[0 M^-1; M^-T 0]", 2 * dim)


def precond_for_B_from_C_approx(M_C, A: SparseMatrix) -> Preconditioner:
    """``[0 A M_C; M_C A^T 0]``-style preconditioner from ``M_C ~ C^{-1}``.

    Applied to ``[v; u]`` it returns ``[M_C(A^T u); A(M_C v)]``.
    """
    m, n = A.shape

    def apply(x):
        return np.concatenate([M_C(spmv_t(A, x[n:])), spmv(A, M_C(x[:n]))])

    return Preconditioner(apply, "for_B", "[0 A M_C; M_C A^T 0]", m + n)


class ILU0:
    """Zero fill-in incomplete LU on the sparsity pattern of a square ``A``."""

    def __init__(self, A: SparseMatrix):
        if A.nrows != A.ncols:
            raise ContractError("ILU(0) needs a square matrix")
        n = A.nrows
        ro, ci = A.row_offsets, A.col_indices
        vals = A.values.copy()
        diag_pos = np.full(n, -1, dtype=np.int64)
        for i in range(n):
            lo, hi = ro[i], ro[i + 1]
            hit = np.flatnonzero(ci[lo:hi] == i)
            if hit.size:
                diag_pos[i] = lo + hit[0]
        for i in range(n):
            lo, hi = ro[i], ro[i + 1]
            if diag_pos[i] < 0:
                raise FactorizationError(f"zero pivot in row {i}", row=i)
            pos = {int(c): p for p, c in zip(range(lo, hi), ci[lo:hi])}
            for p in range(lo, diag_pos[i]):
                k = int(ci[p])
                ukk = vals[diag_pos[k]]
                if ukk == 0.0:
                    raise FactorizationError(f"zero pivot in row {k}", row=k)
                lik = vals[p] / ukk
                vals[p] = lik
                for q in range(diag_pos[k] + 1, ro[k + 1]):
                    j = int(ci[q])
                    t = pos.get(j)
                    if t is not None:
                        vals[t] -= lik * vals[q]
            if vals[diag_pos[i]] == 0.0:
                raise FactorizationError(f"zero pivot in row {i}", row=i)
        rows = np.repeat(np.arange(n), np.diff(ro))
        lower = ci < rows
        upper = ~lower
        self.L = SparseMatrix.from_triplets(
            n, n, np.concatenate([rows[lower], np.arange(n)]),
            np.concatenate([ci[lower], np.arange(n)]),
            np.concatenate([vals[lower], np.ones(n)]))
        self.U = SparseMatrix.from_triplets(n, n, rows[upper], ci[upper], vals[upper])
        self.n = n
        self._L = self.L.to_scipy()
        self._U = self.U.to_scipy()
        self._Lt = self._L.T.tocsr()
        self._Ut = self._U.T.tocsr()

    def solve(self, x):
        """``(LU)^{-1} x``."""
        y = spla.spsolve_triangular(self._L, x, lower=True, unit_diagonal=True)
        return spla.spsolve_triangular(self._U, y, lower=False)

    def solve_t(self, x):
        """``(LU)^{-T} x``."""
        y = spla.spsolve_triangular(self._Ut, x, lower=True)
        return spla.spsolve_triangular(self._Lt, y, lower=False, unit_diagonal=True)


def ilu0(A: SparseMatrix) -> ILU0:
    return ILU0(A)


def jacobi_preconditioners(A: SparseMatrix):
    """Diagonal preconditioners for both stages.

    With a square ``A`` whose diagonal is nonzero, ``M = diag(A)`` feeds the
    ``M``-based forms.  Otherwise ``diag(A^T A)^{-1}`` is used for ``C`` and
    lifted to ``B`` through :func:`precond_for_B_from_C_approx`.
    """
    m, n = A.shape
    d = A.diagonal() if m == n else None
    if d is not None and np.all(d != 0.0):
        inv = 1.0 / d
        return (
            precond_for_C_from_M(lambda x: inv * x, lambda x: inv * x, n),
            precond_for_B_from_M(lambda x: inv * x, lambda x: inv * x, n),
        )
    cn = A.column_norms_sq()
    cinv = np.where(cn > 0, 1.0 / np.where(cn > 0, cn, 1.0), 1.0)
    pc = Preconditioner(lambda x: cinv * x, "for_C", "diag(A^T A)^-1", n)
    return pc, precond_for_B_from_C_approx(lambda x: cinv * x, A)


def ilu0_preconditioners(A: SparseMatrix):
    f = ilu0(A)
    n = A.nrows
    return precond_for_C_from_M(f.solve, f.solve_t, n), precond_for_B_from_M(f.solve, f.solve_t, n)


# ------------------------------------------------------------------ shift-invert

class ShiftInvertOperator(LinearOperator):
    """Dense-factorization inverse whose largest eigenvalues map to singular values.

    ``mode="qr_of_A"`` applies ``(A^T A)^{-1}`` (dimension n) and maps
    ``sigma = 1/sqrt(lambda)``; ``mode="lu_of_B"`` applies ``(B - shift I)^{-1}``
    and maps ``sigma = 1/lambda + shift``.
    """

    def to_singular(self, lam):
        lam = np.asarray(lam, dtype=np.float64)
        if self.mode == "qr_of_A":
            return 1.0 / np.sqrt(lam)
        return 1.0 / lam + self.shift


def shift_invert_operator(A: SparseMatrix, mode="qr_of_A", shift=0.0,
                          threshold=DENSE_THRESHOLD, counter=None) -> ShiftInvertOperator:
    if max(A.shape) > threshold:
        raise RefusedError(
            f"matrix of size {A.shape} exceeds the dense shift-invert threshold "
            f"({threshold}); supply a user-provided inverse operator instead")
    if mode == "qr_of_A":
        if shift != 0.0:
            raise ContractError("qr_of_A mode requires shift = 0")
        B, transposed = oriented(A)
        R = np.linalg.qr(B.to_dense(), mode="r")
        d = np.abs(np.diag(R))
        if d.size == 0 or d.min() <= EPS * max(B.shape) * d.max():
            raise FactorizationError("A is numerically rank deficient; R is singular")

        def apply(x):
            y = sla.solve_triangular(R, x, trans="T", lower=False)
            return sla.solve_triangular(R, y, lower=False)

        op = ShiftInvertOperator(B.ncols, B.ncols, apply, symmetric=True, matvec_cost=1,
                                 counter=counter, name="(A^T A)^-1")
        op.matrix, op.transposed = B, transposed
        # ||A||_2 = ||R||_2, available at no matvec cost
        op.A_norm = float(np.linalg.norm(R, 2))
    elif mode == "lu_of_B":
        m, n = A.shape
        Ad = A.to_dense()
        Bd = np.zeros((m + n, m + n))
        Bd[:n, n:] = Ad.T
        Bd[n:, :n] = Ad
        Bd -= shift * np.eye(m + n)
        with warnings.catch_warnings():
            # singularity is reported below as a FactorizationError
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(Bd, check_finite=True)
        d = np.abs(np.diag(lu))
        if d.min() <= EPS * (m + n) * max(d.max(), 1.0):
            raise FactorizationError("B - shift*I is singular (rectangular A makes B singular at 0)")

        def apply(x):
            return sla.lu_solve((lu, piv), x)

        op = ShiftInvertOperator(m + n, m + n, apply, symmetric=True, matvec_cost=1,
                                 counter=counter, name="(B - sI)^-1")
        op.matrix, op.transposed = A, False
        op.A_norm = float(np.linalg.norm(Ad, 2))
    else:
        raise ContractError(f"unknown shift-invert mode {mode!r}")
    op.mode = mode
    op.shift = float(shift)
    return op
