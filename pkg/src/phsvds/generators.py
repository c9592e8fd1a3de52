"""Synthetic test matrices with known singular values."""

from __future__ import annotations

import numpy as np

from .operators import precond_for_B_from_M, precond_for_C_from_M
from .sparse import SparseMatrix


def clustered_diag():
    """Diagonal matrix with a tiny cluster at the bottom of the spectrum (n = 1006).

    Entries ``1e-14, 1e-12, 1e-8..4e-8`` (step ``1e-8``) and ``1e-3..1`` (step ``1e-3``).
    """
    d = np.concatenate([[1e-14, 1e-12], np.arange(1, 5) * 1e-8,
                        np.arange(1, 1001) * 1e-3])
    return SparseMatrix.diag(d)


def wide_gap_diag():
    """``diag(1..10, 1000:100:1e6)`` (n = 10001), condition number ``1e6``."""
    d = np.concatenate([np.arange(1.0, 11.0), np.arange(1000.0, 1e6 + 1.0, 100.0)])
    return SparseMatrix.diag(d)


def perturbed_diag_preconditioners(A: SparseMatrix, scale=1e4, seed=0):
    """Preconditioners built from ``M = diag(A) + diag(uniform * scale)``.

    Returns ``(prec_C, prec_B, M_diag)`` with ``prec_C = M^-1 M^-T`` and
    ``prec_B = [0 M^-1; M^-T 0]``.
    """
    rng = np.random.default_rng(seed)
    m = A.diagonal() + rng.random(A.ncols) * scale
    inv = 1.0 / m
    n = A.ncols
    return (precond_for_C_from_M(lambda x: inv * x, lambda x: inv * x, n),
            precond_for_B_from_M(lambda x: inv * x, lambda x: inv * x, n), m)


def random_orthogonal(n, rng):
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def prescribed_spectrum(sigma, m=None, seed=0):
    """Dense ``U diag(sigma) V^T`` with Haar-random orthogonal factors.

    ``m`` (default ``len(sigma)``) must be at least ``len(sigma)``.
    """
    s = np.asarray(sigma, dtype=np.float64)
    n = s.size
    m = n if m is None else int(m)
    rng = np.random.default_rng(seed)
    U = random_orthogonal(m, rng)[:, :n]
    V = random_orthogonal(n, rng)
    return SparseMatrix.from_dense((U * s) @ V.T)


def log_spaced(n=300, kappa=1e3, norm=10.0, seed=0):
    """Square matrix with ``n`` log-spaced singular values in ``[norm/kappa, norm]``."""
    s = np.logspace(np.log10(norm / kappa), np.log10(norm), n)
    return prescribed_spectrum(s, seed=seed)


def random_sparse(m, n, density=0.2, seed=0):
    """Random ``m x n`` matrix with i.i.d. normal entries on a Bernoulli pattern."""
    rng = np.random.default_rng(seed)
    mask = rng.random((m, n)) < density
    vals = rng.standard_normal((m, n))
    r, c = np.nonzero(mask)
    return SparseMatrix.from_triplets(m, n, r, c, vals[r, c])


GENERATORS = {
    "clustered": lambda seed: clustered_diag(),
    "wide-gap": lambda seed: wide_gap_diag(),
    "log-spaced": lambda seed: log_spaced(seed=seed),
    "random-sparse": lambda seed: random_sparse(120, 80, density=0.1, seed=seed),
}
