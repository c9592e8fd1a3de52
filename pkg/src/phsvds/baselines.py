"""Unrestarted reference solvers with full reorthogonalization.

Symmetric Lanczos (for ``C``, ``B`` or any symmetric operator) and Lanczos
bidiagonalization of ``A``.  Both record the targeted Ritz value and its
residual norm at every step, which is what the convergence comparisons use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dense import EPS, dense_svd, dense_sym_eig
from .errors import ContractError
from .history import ConvergenceHistory
from .sparse import SparseMatrix, spmv, spmv_t


@dataclass
class LanczosResult:
    values: list  # targeted Ritz value per step
    residuals: list  # its residual norm per step
    ritz: np.ndarray  # all Ritz values at the last step, ascending
    basis: np.ndarray
    T: np.ndarray
    history: ConvergenceHistory
    breakdown: bool = False
    vectors: np.ndarray | None = None  # targeted Ritz vector at the last step

    def steps_to(self, tol, scale=1.0):
        """First step (1-based) whose residual is below ``tol * scale``."""
        for i, r in enumerate(self.residuals):
            if r <= tol * scale:
                return i + 1
        return None


def _pick(theta, extraction, shift, threshold):
    if extraction == "smallest":
        return 0
    if extraction == "largest":
        return len(theta) - 1
    if extraction == "closest_to_shift":
        return int(np.lexsort((theta, np.abs(theta - shift)))[0])
    if extraction == "smallest_above":
        # smallest Ritz value above shift + threshold (skips spurious zeros of B)
        idx = np.flatnonzero(theta - shift > threshold)
        return int(idx[0]) if idx.size else len(theta) - 1
    raise ContractError(f"unknown extraction {extraction!r}")


def lanczos_unrestarted(op, v1, steps, extraction="smallest", shift=0.0, threshold=0.0,
                        tol=None, norm_scale=None, nev=1):
    """Symmetric Lanczos with full reorthogonalization.

    ``extraction`` picks the tracked Ritz value: ``smallest``, ``largest``,
    ``closest_to_shift`` or ``smallest_above`` (the smallest one exceeding
    ``shift + threshold``).  With ``tol`` the run stops once the tracked
    residual falls below ``tol * norm_scale`` (``norm_scale`` defaults to the
    largest absolute Ritz value).  With ``nev > 1`` (extreme extractions only)
    the recorded residual is the largest over the ``nev`` extreme Ritz pairs.
    """
    v = np.asarray(v1, dtype=np.float64).copy()
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ContractError("starting vector must be nonzero")
    n = v.size
    steps = min(int(steps), n)
    Q = np.zeros((n, steps))
    alpha = np.zeros(steps)
    beta = np.zeros(steps)
    Q[:, 0] = v / nv
    vals, res = [], []
    hist = ConvergenceHistory()
    breakdown = False
    theta = np.zeros(0)
    S = np.zeros((0, 0))
    k = 0
    for k in range(steps):
        w = op(Q[:, k])
        alpha[k] = Q[:, k] @ w
        w = w - alpha[k] * Q[:, k] - (beta[k - 1] * Q[:, k - 1] if k else 0.0)
        for _ in range(2):
            w -= Q[:, : k + 1] @ (Q[:, : k + 1].T @ w)
        b = np.linalg.norm(w)
        T = np.diag(alpha[: k + 1]) + np.diag(beta[:k], 1) + np.diag(beta[:k], -1)
        theta, S = dense_sym_eig(T)
        i = _pick(theta, extraction, shift, threshold)
        vals.append(float(theta[i]))
        r = abs(b * S[-1, i])
        if nev > 1 and extraction in ("smallest", "largest"):
            sel = slice(0, nev) if extraction == "smallest" else slice(max(k + 1 - nev, 0), k + 1)
            r = float(np.max(np.abs(b * S[-1, sel]))) if k + 1 >= nev else np.inf
        res.append(float(r))
        hist.record(k + 1, "lanczos", 0, r)
        scale = norm_scale if norm_scale is not None else float(np.max(np.abs(theta)))
        if tol is not None and r <= tol * scale:
            break
        if k + 1 == steps:
            break
        if b <= EPS * max(1.0, float(np.max(np.abs(theta)))) * 10:
            breakdown = True
            hist.annotate("invariant subspace found", k + 1)
            break
        beta[k] = b
        Q[:, k + 1] = w / b
    m = k + 1
    T = np.diag(alpha[:m]) + np.diag(beta[: m - 1], 1) + np.diag(beta[: m - 1], -1)
    i = _pick(theta, extraction, shift, threshold)
    return LanczosResult(vals, res, theta, Q[:, :m], T, hist, breakdown, Q[:, :m] @ S[:, i])


@dataclass
class LbdState:
    P: np.ndarray  # right basis n x k
    Q: np.ndarray  # left basis m x k
    alpha: np.ndarray
    beta: np.ndarray  # superdiagonal (length k-1)
    r: np.ndarray  # A^T Q_k - P_k B_k^T = r e_k^T

    @property
    def Bk(self):
        k = self.alpha.size
        B = np.diag(self.alpha)
        if k > 1:
            B += np.diag(self.beta[: k - 1], 1)
        return B


@dataclass
class LbdResult:
    states: list
    sigmas: list  # targeted singular value per step
    residuals: list
    history: ConvergenceHistory
    triplet: tuple = field(default=None)
    breakdown: bool = False

    def steps_to(self, tol, scale=1.0):
        for i, r in enumerate(self.residuals):
            if r <= tol * scale:
                return i + 1
        return None


def _reorth(X, w):
    for _ in range(2):
        w = w - X @ (X.T @ w)
    return w


def lbd_unrestarted(A: SparseMatrix, p1, steps, target="smallest", tol=None, norm_scale=None,
                    keep_states=True):
    """Golub-Kahan-Lanczos bidiagonalization with full reorthogonalization.

    Builds ``A P_k = Q_k B_k`` and ``A^T Q_k = P_k B_k^T + r_k e_k^T`` with
    ``B_k`` upper bidiagonal.  At each step the targeted triplet of ``B_k`` is
    lifted back and its residual ``sqrt(||A v - s u||^2 + ||A^T u - s v||^2)``
    (which equals ``|e_k^T x| ||r_k||`` for the right singular vector ``x``
    of ``B_k``) is recorded.
    """
    m, n = A.shape
    p = np.asarray(p1, dtype=np.float64).copy()
    if np.linalg.norm(p) == 0:
        raise ContractError("starting vector must be nonzero")
    steps = min(int(steps), n, m)
    P = np.zeros((n, steps))
    Q = np.zeros((m, steps))
    alpha = np.zeros(steps)
    beta = np.zeros(steps)
    P[:, 0] = p / np.linalg.norm(p)
    states, sig, res = [], [], []
    hist = ConvergenceHistory()
    q = spmv(A, P[:, 0])
    breakdown = False
    triplet = None
    k = 0
    for k in range(steps):
        if k:
            q = spmv(A, P[:, k]) - beta[k - 1] * Q[:, k - 1]
        q = _reorth(Q[:, :k], q)
        alpha[k] = np.linalg.norm(q)
        if alpha[k] == 0:
            breakdown = True
            break
        Q[:, k] = q / alpha[k]
        r = spmv_t(A, Q[:, k]) - alpha[k] * P[:, k]
        r = _reorth(P[:, : k + 1], r)
        st = LbdState(P[:, : k + 1].copy(), Q[:, : k + 1].copy(), alpha[: k + 1].copy(),
                      beta[:k].copy(), r.copy())
        Bk = st.Bk
        U, s, X = dense_svd(Bk)
        i = 0 if target == "smallest" else s.size - 1
        nr = np.linalg.norm(r)
        rr = abs(X[-1, i]) * nr
        sig.append(float(s[i]))
        res.append(float(rr))
        hist.record(k + 1, "lbd", 0, rr)
        triplet = (float(s[i]), Q[:, : k + 1] @ U[:, i], P[:, : k + 1] @ X[:, i])
        if keep_states:
            states.append(st)
        scale = norm_scale if norm_scale is not None else float(s[-1])
        if tol is not None and rr <= tol * scale:
            break
        if k + 1 == steps:
            break
        beta[k] = nr
        if nr <= EPS * max(1.0, float(s[-1])) * 10:
            breakdown = True
            hist.annotate("invariant subspace found", k + 1)
            break
        P[:, k + 1] = r / nr
    return LbdResult(states, sig, res, hist, triplet, breakdown)
