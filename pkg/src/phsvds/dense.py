"""Small dense kernels used by the projection steps.

The production kernels (``dense_sym_eig``, ``dense_svd``) call LAPACK through
numpy.  ``jacobi_eigh`` and ``jacobi_svd`` are self-contained rotation-based
reference implementations; the test-suite uses them as independent oracles.
QR is two-pass Gram-Schmidt with a one-column append, which is what the
refined projection needs.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, RankDeficiencyError

EPS = 2.22e-16

__all__ = [
    "EPS",
    "dense_sym_eig",
    "dense_svd",
    "jacobi_eigh",
    "jacobi_svd",
    "qr_factor",
    "qr_append_column",
    "orthonormalize",
]


def _as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError("expected a 2-D array")
    return a


def dense_sym_eig(H):
    """Eigen-decomposition of a symmetric matrix, eigenvalues ascending."""
    H = _as_matrix(H)
    if H.shape[0] != H.shape[1]:
        raise ContractError(f"dense_sym_eig needs a square matrix, got {H.shape}")
    if H.size == 0:
        return np.zeros(0), np.zeros((0, 0))
    scale = np.max(np.abs(H))
    if np.max(np.abs(H - H.T)) > 1e-12 * max(scale, np.finfo(float).tiny):
        raise ContractError("dense_sym_eig needs a symmetric matrix")
    return np.linalg.eigh(0.5 * (H + H.T))


def dense_svd(R):
    """Thin SVD ``R = U diag(s) V^T`` with singular values ascending."""
    R = _as_matrix(R)
    m, n = R.shape
    p = min(m, n)
    if p == 0:
        return np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0))
    U, s, Vt = np.linalg.svd(R, full_matrices=False)
    return U[:, ::-1], s[::-1].copy(), Vt[::-1].T


# ----------------------------------------------------------------- Jacobi oracles

def _round_robin(n):
    """Disjoint index pairs covering all n(n-1)/2 pairs in n-1 (or n) rounds."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    N = len(players)
    rounds = []
    for _ in range(N - 1):
        p, q = [], []
        for i in range(N // 2):
            a, b = players[i], players[N - 1 - i]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=int), np.array(q, dtype=int)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(H, tol=1e-15, max_sweeps=100):
    """Cyclic two-sided Jacobi eigen-solver (reference implementation).

    Runs parallel-ordered sweeps until the off-diagonal Frobenius norm is
    below ``tol * ||H||_F``.  Returns ascending eigenvalues and eigenvectors.
    """
    A = _as_matrix(H).copy()
    n = A.shape[0]
    if n != A.shape[1]:
        raise ContractError("jacobi_eigh needs a square matrix")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n <= 1:
        return np.diag(A).copy(), V
    total = np.linalg.norm(A)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * total or off == 0.0:
            break
        for p, q in rounds:
            apq = A[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (A[q, q] - A[p, p]) / (2.0 * apq)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            J = np.eye(n)
            J[p, p] = c
            J[q, q] = c
            J[p, q] = s
            J[q, p] = -s
            A = J.T @ A @ J
            V = V @ J
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def jacobi_svd(R, tol=1e-15, max_sweeps=100):
    """One-sided (Hestenes) Jacobi SVD, singular values ascending.

    Reference implementation: orthogonalizes column pairs by plane rotations
    until every pair satisfies ``|a_p . a_q| <= tol * |a_p| |a_q|``.
    """
    R = _as_matrix(R)
    m, n = R.shape
    if m < n:
        U, s, V = jacobi_svd(R.T, tol, max_sweeps)
        return V, s, U
    A = R.copy()
    V = np.eye(n)
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = A[:, p], A[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > tol * (np.sqrt(alpha) * np.sqrt(beta))
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            with np.errstate(over="ignore"):
                # an overflowing zeta gives t = 0, the correct limit
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            Ap, Aq = A[:, p].copy(), A[:, q]
            A[:, p] = c * Ap - s * Aq
            A[:, q] = s * Ap + c * Aq
            Vp, Vq = V[:, p].copy(), V[:, q]
            V[:, p] = c * Vp - s * Vq
            V[:, q] = s * Vp + c * Vq
        if not rotated:
            break
    sig = np.linalg.norm(A, axis=0)
    order = np.argsort(sig, kind="stable")
    sig, A, V = sig[order], A[:, order], V[:, order]
    U = np.zeros((m, n))
    nz = sig > 0
    U[:, nz] = A[:, nz] / sig[nz]
    if not np.all(nz):
        # complete U on the null part with an orthonormal complement
        basis = U[:, nz]
        fill = []
        for e in np.eye(m):
            x = e - basis @ (basis.T @ e)
            for f in fill:
                x -= f * (f @ x)
            x -= basis @ (basis.T @ x)
            for f in fill:
                x -= f * (f @ x)
            nx = np.linalg.norm(x)
            if nx > 1e-8:
                fill.append(x / nx)
            if len(fill) == int(np.sum(~nz)):
                break
        U[:, ~nz] = np.array(fill).T
    return U, sig, V


# ----------------------------------------------------------------- Gram-Schmidt QR

def _project_out(Q, w):
    """Project ``w`` off the columns of ``Q`` with two Gram-Schmidt passes.

    Each pass is a classical (block) projection; two passes give the same
    orthogonality level as two-pass modified Gram-Schmidt.
    """
    if Q.shape[1] == 0:
        return w, np.zeros(0)
    coef = Q.T @ w
    w = w - Q @ coef
    c2 = Q.T @ w
    w = w - Q @ c2
    return w, coef + c2


def qr_append_column(Q, R, w, complete=False, rng=None):
    """Extend a thin QR factorization by one column.

    Raises :class:`RankDeficiencyError` when ``w`` is numerically in
    ``span(Q)``.  With ``complete=True`` the factorization is extended anyway
    by an arbitrary unit vector orthogonal to ``Q`` and a zero diagonal entry,
    which keeps ``Q' R' = [Q R | w]`` exact up to rounding.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    n = w.size
    if Q is None or Q.size == 0:
        Q = np.zeros((n, 0))
        R = np.zeros((0, 0))
    k = Q.shape[1]
    nw = np.linalg.norm(w)
    res, coef = _project_out(Q, w)
    nr = np.linalg.norm(res)
    Rn = np.zeros((k + 1, k + 1))
    Rn[:k, :k] = R
    Rn[:k, k] = coef
    if nr < EPS * nw * n or nr == 0.0:
        if not complete:
            raise RankDeficiencyError("new column lies in the span of Q")
        if k >= n:
            raise RankDeficiencyError("Q already spans the whole space")
        rng = np.random.default_rng(0) if rng is None else rng
        while True:
            x, _ = _project_out(Q, rng.standard_normal(n))
            nx = np.linalg.norm(x)
            if nx > 1e-8:
                break
        q = x / nx
        # residual is rounding noise; it is absorbed into the factorization error
        Rn[k, k] = 0.0
    else:
        q = res / nr
        Rn[k, k] = nr
    return np.column_stack([Q, q]), Rn


def qr_factor(W, complete=False, rng=None):
    """Thin QR via repeated one-column appends (two-pass MGS)."""
    W = _as_matrix(W)
    n, k = W.shape
    Q, R = np.zeros((n, 0)), np.zeros((0, 0))
    for j in range(k):
        Q, R = qr_append_column(Q, R, W[:, j], complete=complete, rng=rng)
    return Q, R


def orthonormalize(X, against=None, drop_tol=1e-10):
    """Block two-pass Gram-Schmidt of the columns of ``X``.

    ``against`` holds orthonormal columns to project out first.  Columns whose
    norm collapses below ``drop_tol`` times their original norm are dropped;
    the surviving orthonormal block is returned together with the indices of
    the kept input columns.
    """
    X = _as_matrix(X)
    n = X.shape[0]
    basis = [] if against is None or against.size == 0 else [np.asarray(against)]
    out, kept = [], []
    for j in range(X.shape[1]):
        x = X[:, j].copy()
        nx0 = np.linalg.norm(x)
        if nx0 == 0.0:
            continue
        for _ in range(2):
            for B in basis:
                x -= B @ (B.T @ x)
            for q in out:
                x -= q * (q @ x)
        nx = np.linalg.norm(x)
        if nx <= drop_tol * nx0:
            continue
        out.append(x / nx)
        kept.append(j)
    Q = np.column_stack(out) if out else np.zeros((n, 0))
    return Q, kept
