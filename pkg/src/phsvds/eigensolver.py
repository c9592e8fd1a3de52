"""Davidson-type symmetric eigensolver.

GD+k: thick restart that keeps ``min_restart`` Ritz vectors plus ``k_prev``
previous-iteration Ritz vectors, locking with re-introduction of the next
initial guess, Rayleigh-Ritz or refined extraction, and an optional
Jacobi-Davidson inner solve (symmetric QMR on the projected correction
equation) in place of the plain preconditioned residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dense import EPS, _project_out, dense_svd, dense_sym_eig
from .errors import ContractError, NotConvergedError
from .history import ConvergenceHistory

SQRT_HALF = math.sqrt(0.5)
WHICH = ("smallest_algebraic", "largest_algebraic", "closest_to_shifts", "closest_geq")


@dataclass
class EigConfig:
    max_basis: int = 35
    min_restart: int = 21
    k_prev: int = 1
    block_size: int = 1
    max_matvecs: int = 200_000
    tol: float = 1e-10
    extraction: str = "rayleigh_ritz"
    which: str = "smallest_algebraic"
    shifts: tuple = ()
    method: str = "gd_plus_k"
    max_inner: int | None = None
    max_outer: int | None = None
    krylov_fill: bool = False
    # accept a target whose residual sits at this multiple of eps*||op|| and stops improving
    practical_floor: float = 10.0
    stall_iters: int = 25
    fill_random: bool = True
    seed: int = 0
    stage: str = "eig"

    def validate(self, num_wanted=1):
        if self.which not in WHICH:
            raise ContractError(f"unknown which={self.which!r}")
        if self.extraction not in ("rayleigh_ritz", "refined"):
            raise ContractError(f"unknown extraction={self.extraction!r}")
        if self.method not in ("gd_plus_k", "jdqmr"):
            raise ContractError(f"unknown method={self.method!r}")
        if self.extraction == "refined" and self.which != "closest_to_shifts":
            raise ContractError("refined extraction needs which='closest_to_shifts'")
        if self.which == "closest_to_shifts" and len(self.shifts) == 0:
            raise ContractError("closest_to_shifts needs at least one shift")
        if self.block_size < 1 or self.k_prev < 0 or self.min_restart < 1:
            raise ContractError("block_size >= 1, k_prev >= 0, min_restart >= 1 required")
        if self.min_restart + self.k_prev + self.block_size > self.max_basis:
            raise ContractError("min_restart + k_prev + block_size must not exceed max_basis")


class SubspaceState:
    """Working set of the eigensolver.

    ``V`` is orthonormal, ``W = op V``, ``H = V^T W``.  In refined mode
    ``Q R = W - shift V`` is kept up to date by one-column appends.  ``D``
    collects every deflated direction (locked vectors and their partners).
    ``V``, ``W`` and ``Q`` live in preallocated buffers so appends do not copy.
    """

    def __init__(self, V, W, H, D, target_shift=0.0, Q=None, R=None, qr_shift=None,
                 qr_full=True, prev_coeffs=None, capacity=0):
        self._cap = capacity
        self._Vb = self._Wb = self._Qb = None
        self._j = self._qj = 0
        self.V = V
        self.W = W
        self.H = H
        self.D = D
        self.target_shift = target_shift
        self.Q = Q
        self.R = R
        self.qr_shift = qr_shift
        self.qr_full = qr_full
        self.prev_coeffs = prev_coeffs
        self.locked_values = []
        self.locked_vectors = []

    def _buffer(self, X):
        X = np.asarray(X, dtype=np.float64)
        cap = max(self._cap, X.shape[1])
        buf = np.empty((X.shape[0], cap), order="F")
        buf[:, : X.shape[1]] = X
        return buf

    @property
    def V(self):
        return self._Vb[:, : self._j]

    @V.setter
    def V(self, X):
        self._Vb = self._buffer(X)
        self._j = X.shape[1]

    @property
    def W(self):
        return self._Wb[:, : self._j]

    @W.setter
    def W(self, X):
        if X.shape[1] != self._j:
            raise ContractError("W must have as many columns as V")
        self._Wb = self._buffer(X)

    @property
    def Q(self):
        return None if self._Qb is None else self._Qb[:, : self._qj]

    @Q.setter
    def Q(self, X):
        if X is None:
            self._Qb, self._qj = None, 0
        else:
            self._Qb = self._buffer(X)
            self._qj = X.shape[1]

    def set_basis(self, V, W):
        self.V = V
        self.W = W

    def append_columns(self, Vn, Wn):
        k = Vn.shape[1]
        j = self._j
        if j + k > self._Vb.shape[1]:
            self._cap = max(self._cap, j + k)
            V, W = self.V.copy(), self.W.copy()
            self._Vb, self._Wb = self._buffer(V), self._buffer(W)
        self._Vb[:, j: j + k] = Vn
        self._Wb[:, j: j + k] = Wn
        self._j = j + k

    def qr_append(self, w, rng):
        """One-column update of ``Q R = W - shift V`` in place."""
        qj = self._qj
        Q = self._Qb[:, :qj]
        nw = np.linalg.norm(w)
        res, coef = _project_out(Q, w)
        nr = np.linalg.norm(res)
        Rn = np.zeros((qj + 1, qj + 1))
        Rn[:qj, :qj] = self.R
        Rn[:qj, qj] = coef
        if nr < EPS * nw * w.size or nr == 0.0:
            # w is in span(Q): extend Q by any orthogonal unit vector, R_kk = 0
            while True:
                x, _ = _project_out(Q, rng.standard_normal(w.size))
                nx = np.linalg.norm(x)
                if nx > 1e-8:
                    break
            q = x / nx
        else:
            q, Rn[qj, qj] = res / nr, nr
        if qj + 1 > self._Qb.shape[1]:
            self._cap = max(self._cap, qj + 1)
            self._Qb = self._buffer(self.Q)
        self._Qb[:, qj] = q
        self._qj = qj + 1
        self.R = Rn

    @property
    def size(self):
        return self.V.shape[1]

    def check(self, tol=1e-12):
        """Raise ``AssertionError`` if the documented invariants are broken."""
        j = self.size
        assert np.max(np.abs(self.V.T @ self.V - np.eye(j)), initial=0.0) <= tol
        if self.D.shape[1]:
            assert np.max(np.abs(self.D.T @ self.V), initial=0.0) <= tol
        nh = max(np.linalg.norm(self.H), 1e-300)
        assert np.max(np.abs(self.H - self.V.T @ self.W), initial=0.0) <= 50 * EPS * nh * max(j, 1)


@dataclass
class EigResult:
    values: np.ndarray
    vectors: np.ndarray
    residual_norms: np.ndarray
    converged: bool
    history: ConvergenceHistory
    op_norm_est: float
    outer_iterations: int
    applies: int
    flags: list = field(default_factory=list)
    approx_values: np.ndarray | None = None
    approx_vectors: np.ndarray | None = None
    ritz_values: np.ndarray | None = None  # leading Ritz pairs of the final basis
    ritz_vectors: np.ndarray | None = None


# ---------------------------------------------------------------- extraction

def order_ritz(theta, which, shift=0.0):
    theta = np.asarray(theta)
    if which == "smallest_algebraic":
        return np.argsort(theta, kind="stable")
    if which == "largest_algebraic":
        return np.argsort(-theta, kind="stable")
    if which == "closest_geq":
        # values >= shift ascending, then the ones below it, nearest first
        below = theta < shift
        return np.lexsort((np.abs(theta - shift), below))
    return np.lexsort((theta, np.abs(theta - shift)))


def rayleigh_ritz_extract(state: SubspaceState, which, shift=None):
    """Ritz values/coefficient vectors of ``H`` ordered by ``which``."""
    theta, S = dense_sym_eig(state.H)
    order = order_ritz(theta, which, state.target_shift if shift is None else shift)
    return theta[order], S[:, order]


class StaleFactorizationError(RuntimeError):
    pass


def refresh_qr(state: SubspaceState, rng=None):
    """Full thin QR of ``W - shift V`` (Householder); later columns are appended."""
    state.Q, state.R = np.linalg.qr(state.W - state.target_shift * state.V)
    state.qr_shift = state.target_shift
    state.qr_full = False


def refined_extract(state: SubspaceState, verify=False):
    """Refined vectors minimizing ``||(op - shift) V y||`` over the basis.

    Returns ``(theta, Y, sing)``: right singular vectors of ``R`` ordered by
    ascending singular value, their Rayleigh quotients, and the singular
    values (the residual norms with respect to the fixed shift).
    """
    if (state.qr_full or state.R is None or state.qr_shift != state.target_shift
            or state.R.shape[1] != state.size):
        raise StaleFactorizationError("QR of W - shift V is stale; re-factorize first")
    if verify:
        M = state.W - state.target_shift * state.V
        err = np.linalg.norm(state.Q @ state.R - M)
        if err > 100 * EPS * max(np.linalg.norm(state.W), 1e-300) * max(state.size, 1):
            raise StaleFactorizationError(f"QR residual {err:.2e} too large")
    _, sing, Y = dense_svd(state.R)
    theta = np.einsum("ij,ij->j", Y, state.H @ Y)
    return theta, Y, sing


# ---------------------------------------------------------------- basis updates

def _orth_against(x, blocks, passes=3):
    """Project ``x`` off the orthonormal column blocks.

    A further pass is made only while the norm drops below ``1/sqrt(2)`` of
    its value before the pass.  Returns ``(x, ||x||, ||x_in||)``.
    """
    n0 = math.sqrt(float(x @ x))
    nprev = n0
    nx = n0
    for _ in range(passes):
        for B in blocks:
            if B is not None and B.shape[1]:
                x = x - B @ (B.T @ x)
        nx = math.sqrt(float(x @ x))
        if nx > nprev * SQRT_HALF:
            break
        nprev = nx
    return x, nx, n0


def _random_direction(n, blocks, rng):
    for _ in range(100):
        x, nx, n0 = _orth_against(rng.standard_normal(n), blocks)
        if nx > 1e-8 * n0:
            return x / nx
    raise ContractError("cannot find a direction orthogonal to the current subspace")


def _append(state, op, vs, refined, rng):
    """Append orthonormal columns ``vs`` (already orthogonal to V and D)."""
    if not vs:
        return
    Vn = np.column_stack(vs)
    Wn = op(Vn)
    if Wn.ndim == 1:
        Wn = Wn[:, None]
    j = state.size
    k = Vn.shape[1]
    Hn = np.zeros((j + k, j + k))
    Hn[:j, :j] = state.H
    cross = state.V.T @ Wn
    Hn[:j, j:] = cross
    Hn[j:, :j] = cross.T
    blk = Vn.T @ Wn
    Hn[j:, j:] = 0.5 * (blk + blk.T)
    state.append_columns(Vn, Wn)
    state.H = Hn
    if state.prev_coeffs is not None:
        state.prev_coeffs = np.vstack([state.prev_coeffs, np.zeros((k, state.prev_coeffs.shape[1]))])
    if refined and not state.qr_full and state.qr_shift == state.target_shift:
        for i in range(k):
            state.qr_append(Wn[:, i] - state.target_shift * Vn[:, i], rng)
    else:
        state.qr_full = True


def _transform(state, T):
    """Replace the basis by ``V T`` (``T`` with orthonormal columns)."""
    state.set_basis(state.V @ T, state.W @ T)
    H = T.T @ state.H @ T
    state.H = 0.5 * (H + H.T)
    if state.prev_coeffs is not None:
        state.prev_coeffs = T.T @ state.prev_coeffs
    state.qr_full = True


def lock_and_reintroduce(state: SubspaceState, op, coeffs, values, next_guess=None,
                         partner=None, history=None, rng=None, mv=None):
    """Lock the pairs ``(values[i], V @ coeffs[:, i])``.

    The locked directions (and, if ``partner`` is given, their partner vectors)
    are removed from the basis and added to the deflation set.  ``next_guess``
    is orthogonalized against everything and appended as a new basis column.
    Returns the locked vectors.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    if coeffs.shape[0] != state.size:
        coeffs = coeffs.T
    X = state.V @ coeffs
    AX = state.W @ coeffs
    norms = np.linalg.norm(X, axis=0)
    X, AX = X / norms, AX / norms
    locked = []
    for i, val in enumerate(np.atleast_1d(values)):
        state.locked_values.append(float(val))
        state.locked_vectors.append(X[:, i].copy())
        locked.append(X[:, i].copy())

    # new deflation directions and their images
    dirs, imgs = [], []
    blocks = [state.D]
    for i in range(X.shape[1]):
        x, nx, n0 = _orth_against(X[:, i], blocks + ([np.column_stack(dirs)] if dirs else []))
        if nx > 1e-8 * n0:
            dirs.append(x / nx)
            imgs.append(AX[:, i] / nx if nx > 0.99 * n0 else op(x / nx))
        if partner is not None:
            p = partner(X[:, i])
            p, npn, n0p = _orth_against(p, blocks + [np.column_stack(dirs)])
            if npn > 0.5 * n0p:
                dirs.append(p / npn)
                imgs.append(op(p / npn))
    Xd = np.column_stack(dirs)
    AXd = np.column_stack(imgs)

    proj = Xd.T @ state.V
    Vp = state.V - Xd @ proj
    Wp = state.W - AXd @ proj
    G = Vp.T @ Vp
    g, U = dense_sym_eig(0.5 * (G + G.T))
    keep = g > 1e-2
    T = U[:, keep] / np.sqrt(g[keep])
    prev = state.prev_coeffs
    state.set_basis(Vp @ T, Wp @ T)
    # re-orthonormalize to working precision
    Qv, Rv = np.linalg.qr(state.V)
    Rinv = np.linalg.inv(Rv) if Rv.size else Rv
    state.set_basis(Qv, state.W @ Rinv)
    T = T @ Rinv
    H = state.V.T @ state.W
    state.H = 0.5 * (H + H.T)
    if prev is not None:
        state.prev_coeffs = T.T @ (G @ prev) if state.size else None
    state.D = np.column_stack([state.D, Xd])
    state.qr_full = True

    if next_guess is not None:
        g0 = np.asarray(next_guess, dtype=np.float64)
        x, nx, n0 = _orth_against(g0, [state.D, state.V])
        if n0 > 0 and nx > 1e-8 * n0:
            _append(state, op, [x / nx], False, rng)
        elif history is not None:
            history.annotate("re-introduced guess lies in span(locked, V); skipped",
                             None if mv is None else mv())
    return locked


# ---------------------------------------------------------------- JD inner solve

@dataclass
class InnerInfo:
    iterations: int
    reason: str
    eres: float


def jd_correction_solve(op, prec, u, theta, r, outer_iteration=1, max_inner=None,
                        locked=None, stall_ratio=0.99, stall_steps=3):
    """Approximate solution ``t`` of the projected correction equation

        (I - QQ^T)(op - theta I)(I - QQ^T) t = -r,   Q = [locked, u]

    by symmetric QMR preconditioned with ``(I - QQ^T) prec (I - QQ^T)``.

    Stops at the first of: linear residual below
    ``max(0.1**outer_iteration, 1e-14) * ||r||``; the estimated eigen-residual
    of ``u + t`` stagnating (ratio above ``stall_ratio`` for ``stall_steps``
    steps); ``max_inner`` iterations.
    """
    u = np.asarray(u, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    n = u.size
    Qp = u[:, None] if locked is None or locked.size == 0 else np.column_stack([locked, u])

    def proj(x):
        return x - Qp @ (Qp.T @ x)

    def M(x):
        y = proj(x)
        if prec is not None:
            y = prec(y)
            if not np.all(np.isfinite(y)):
                raise FloatingPointError("preconditioner produced non-finite values")
        return proj(y)

    rn = float(np.linalg.norm(r))
    if max_inner is None:
        max_inner = min(n, 1000)
    if rn == 0.0:
        return np.zeros(n), InnerInfo(0, "zero residual", 0.0)
    if max_inner <= 0:
        return M(r), InnerInfo(0, "max_inner", rn)

    def A(x):
        return proj(op(x) - theta * x)

    tol = max(0.1 ** outer_iteration, 1e-14) * rn
    b = -proj(r)
    g = b.copy()
    d = M(g)
    rho_prev = float(g @ d)
    tau = float(np.linalg.norm(g))
    thq = 0.0
    sol = np.zeros(n)
    Asol = np.zeros(n)
    delta = np.zeros(n)
    Adelta = np.zeros(n)
    eres_prev = rn
    stalls = 0
    reason = "max_inner"
    eres = rn
    it = 0
    for it in range(1, max_inner + 1):
        w = A(d)
        sigma = float(d @ w)
        if sigma == 0.0 or rho_prev == 0.0:
            reason = "breakdown"
            it -= 1
            break
        alpha = rho_prev / sigma
        g = g - alpha * w
        thq_prev = thq
        thq = float(np.linalg.norm(g)) / tau
        c2 = 1.0 / (1.0 + thq * thq)
        tau = tau * thq * math.sqrt(c2)
        gamma = c2 * thq_prev * thq_prev
        eta = alpha * c2
        delta = gamma * delta + eta * d
        Adelta = gamma * Adelta + eta * w
        sol = sol + delta
        Asol = Asol + Adelta

        # (a) linear residual
        if np.linalg.norm(b - Asol) <= tol:
            reason = "linear tolerance"
            eres = _eres_estimate(u, theta, r, sol, Asol)
            break
        # (b) eigen-residual of u + t from the recurrences
        eres = _eres_estimate(u, theta, r, sol, Asol)
        if eres > stall_ratio * eres_prev:
            stalls += 1
            if stalls >= stall_steps:
                reason = "eigen-residual stagnation"
                break
        else:
            stalls = 0
        eres_prev = eres

        wz = M(g)
        rho = float(g @ wz)
        if rho == 0.0:
            reason = "breakdown"
            break
        d = wz + (rho / rho_prev) * d
        rho_prev = rho
    return sol, InnerInfo(it, reason, eres)


def _eres_estimate(u, theta, r, t, z):
    """Residual norm of the normalized ``u + t`` using ``z = P(op - theta)t``."""
    rt = float(r @ t)
    nx2 = 1.0 + float(t @ t)
    theta_new = theta + (2.0 * rt + float(t @ z)) / nx2
    x = u + t
    res = (theta - theta_new) * x + r + z + rt * u
    return float(np.linalg.norm(res)) / math.sqrt(nx2)


# ---------------------------------------------------------------- driver

def gd_plus_k_solve(op, prec, cfg: EigConfig, guesses=(), num_wanted=1, *,
                    convergence_test=None, metric=None, deflate=None, partner=None,
                    history=None, mv=None, callback=None):
    """Compute ``num_wanted`` eigenpairs of the symmetric operator ``op``.

    Parameters
    ----------
    op : LinearOperator
        Symmetric operator.
    prec : callable or None
        Preconditioner applied to residuals (or inside the JD inner solve).
    cfg : EigConfig
    guesses : sequence of vectors
        Initial guesses in target order.  After each lock, the guess of the
        next target is re-introduced into the basis.
    convergence_test : callable, optional
        ``f(theta, x, rnorm, op_norm_est, target_index) -> bool``.  Defaults to
        ``rnorm <= cfg.tol * op_norm_est``.
    metric : callable, optional
        ``f(theta, rnorm) -> float`` mapping residuals into the metric stored
        in the history.
    deflate : array, optional
        Orthonormal columns kept out of the search space from the start.
    partner : callable, optional
        Maps a locked vector to a companion direction that is deflated with it.
    mv : callable, optional
        Returns the running matvec count recorded in the history.
    callback : callable, optional
        Called every outer iteration with a dict describing the current target.

    Raises
    ------
    NotConvergedError
        When ``cfg.max_matvecs`` applications are exhausted; ``.partial`` holds
        an :class:`EigResult` with the pairs locked so far.
    """
    if not getattr(op, "is_symmetric", True):
        raise ContractError("gd_plus_k_solve needs a symmetric operator")
    n = op.dim_in
    cfg.validate(num_wanted)
    num_wanted = int(num_wanted)
    if num_wanted < 1 or num_wanted > n:
        raise ContractError(f"num_wanted must be in [1, {n}]")
    rng = np.random.default_rng(cfg.seed)
    history = ConvergenceHistory(seed=cfg.seed) if history is None else history
    if history.seed is None:
        history.seed = cfg.seed
    applies0 = op.applies
    if mv is None:
        def mv():
            return op.applies - applies0
    mv0 = mv()

    def budget_left():
        # the clock also sees products made by convergence tests
        return cfg.max_matvecs - (mv() - mv0)
    refined = cfg.extraction == "refined"
    jd = cfg.method == "jdqmr"
    max_basis = min(cfg.max_basis, n)
    block = min(cfg.block_size, num_wanted)
    min_restart = max(1, min(cfg.min_restart, max_basis - cfg.k_prev - block))
    shifts = list(cfg.shifts)

    def shift_for(idx):
        return shifts[min(idx, len(shifts) - 1)] if shifts else 0.0

    if convergence_test is None:
        def convergence_test(theta, x, rn, norm_est, idx):
            return rn <= cfg.tol * norm_est

    D = np.zeros((n, 0)) if deflate is None else np.asarray(deflate, dtype=np.float64).reshape(n, -1)
    guesses = [np.asarray(g, dtype=np.float64).ravel() for g in guesses]

    # initial basis: guesses in order, degenerate ones replaced by random vectors
    vs = []
    for g in guesses[:max_basis]:
        x, nx, n0 = _orth_against(g, [D] + ([np.column_stack(vs)] if vs else []))
        if n0 == 0.0 or nx < EPS * n:
            history.annotate("degenerate initial guess replaced by a random vector", 0)
            vs.append(_random_direction(n, [D] + ([np.column_stack(vs)] if vs else []), rng))
        else:
            vs.append(x / nx)
    if not vs:
        vs.append(_random_direction(n, [D], rng))
    state = SubspaceState(V=np.zeros((n, 0)), W=np.zeros((n, 0)), H=np.zeros((0, 0)), D=D,
                          target_shift=shift_for(0), capacity=max_basis + block + 2)
    _append(state, op, vs, False, rng)
    if cfg.krylov_fill:
        kw = state.W[:, 0].copy()
        while state.size < min(min_restart, n - D.shape[1]):
            x, nx, n0 = _orth_against(kw, [state.D, state.V])
            if n0 == 0.0 or nx <= 1e-10 * n0:
                break
            _append(state, op, [x / nx], False, rng)
            kw = state.W[:, -1].copy()

    op_norm_est = 0.0
    outer = 0
    best = math.inf
    best_iter = 0
    target_iters = 0
    flags = []
    res_norms = []
    approx = (np.zeros(0), np.zeros((n, 0)))
    prev_cur = None

    def finish(converged):
        vals = np.array(state.locked_values)
        vecs = np.column_stack(state.locked_vectors) if state.locked_vectors else np.zeros((n, 0))
        rns = np.array(res_norms)
        if cfg.which not in ("closest_to_shifts", "closest_geq") and vals.size:
            order = order_ritz(vals, cfg.which)
            vals, vecs, rns = vals[order], vecs[:, order], rns[order]
            fl = [flags[i] for i in order]
        else:
            fl = list(flags)
        rv = rx = None
        if state.size:
            th, S = rayleigh_ritz_extract(state, cfg.which)
            p = min(state.size, min_restart)
            rv, rx = th[:p], state.V @ S[:, :p]
        return EigResult(vals, vecs, rns, converged, history, op_norm_est, outer,
                         op.applies - applies0, fl, approx[0], approx[1], rv, rx)

    while True:
        nlocked = len(state.locked_values)
        if nlocked >= num_wanted:
            return finish(True)
        if budget_left() <= 0:
            raise NotConvergedError(
                f"matvec budget {cfg.max_matvecs} exhausted with {nlocked}/{num_wanted} pairs",
                partial=finish(False))
        if cfg.max_outer is not None and outer >= cfg.max_outer:
            return finish(False)
        if state.size == 0:
            _append(state, op, [_random_direction(n, [state.D], rng)], False, rng)
        outer += 1
        target_iters += 1

        new_shift = shift_for(nlocked)
        if new_shift != state.target_shift:
            state.target_shift = new_shift
            state.qr_full = True
        theta, S = rayleigh_ritz_extract(state, cfg.which)
        op_norm_est = max(op_norm_est, float(np.max(np.abs(theta))))
        nb = min(block, num_wanted - nlocked, state.size)
        ys, ths = [], []
        for b in range(nb):
            if b == 0 and refined:
                if state.qr_full or state.qr_shift != state.target_shift:
                    refresh_qr(state, rng)
                rth, Y, _ = refined_extract(state)
                y = Y[:, 0]
                th = float(rth[0])
            else:
                y, th = S[:, b], float(theta[b])
            ys.append(y)
            ths.append(th)
        Yc = np.column_stack(ys)
        X = state.V @ Yc
        Rm = state.W @ Yc - X * np.array(ths)
        rns = np.linalg.norm(Rm, axis=0)
        approx = (np.array(ths), X.copy())

        conv = []
        for b in range(nb):
            ok = convergence_test(ths[b], X[:, b], float(rns[b]), op_norm_est, nlocked + b)
            practical = False
            if not ok and b == 0 and rns[b] <= cfg.practical_floor * EPS * op_norm_est \
                    and outer - best_iter >= cfg.stall_iters:
                ok = practical = True
            conv.append((ok, practical))
        if rns[0] < best:
            best, best_iter = float(rns[0]), outer
        if callback is not None:
            callback({"outer": outer, "theta": ths[0], "x": X[:, 0], "rnorm": float(rns[0]),
                      "target_index": nlocked, "state": state, "op_norm_est": op_norm_est})

        # lock the converged prefix of the block
        nconv = 0
        while nconv < nb and conv[nconv][0]:
            nconv += 1
        hm = metric(ths[0], float(rns[0])) if metric is not None else float(rns[0])
        history.record(mv(), cfg.stage, nlocked, hm, locked=nconv > 0,
                       annotations=["practically converged"] if nconv and conv[0][1] else [])
        if nconv:
            for b in range(nconv):
                flags.append("practical" if conv[b][1] else "converged")
                res_norms.append(float(rns[b]))
            nxt = nlocked + nconv
            guess = guesses[nxt] if nxt < len(guesses) and nxt < num_wanted else None
            if guess is None and cfg.fill_random and nxt < num_wanted:
                # keeps every eigenspace represented, so repeated eigenvalues are found
                guess = rng.standard_normal(state.V.shape[0])
            lock_and_reintroduce(state, op, Yc[:, :nconv], ths[:nconv], next_guess=guess,
                                 partner=partner, history=history, rng=rng, mv=mv)
            best, best_iter, target_iters = math.inf, outer, 0
            prev_cur = None
            state.prev_coeffs = None
            continue

        # corrections
        corr = []
        Dloc = state.D
        for b in range(nb):
            r = Rm[:, b]
            if jd:
                cap = max(1, budget_left() - 1)
                inner = min(min(n, 1000) if cfg.max_inner is None else cfg.max_inner, cap)
                t, _info = jd_correction_solve(op, prec, X[:, b], ths[b], r,
                                               outer_iteration=target_iters,
                                               max_inner=inner, locked=Dloc)
                if _info.iterations == 0 and not np.any(t):
                    t = prec(r) if prec is not None else r.copy()
            else:
                t = prec(r) if prec is not None else r.copy()
            if not np.all(np.isfinite(t)):
                raise FloatingPointError("preconditioner produced non-finite values")
            corr.append(t)

        # restart
        cur = Yc
        if state.size + nb > max_basis:
            keep = []
            if refined:
                keep.append(Yc[:, 0])
            keep.extend(S[:, i] for i in range(min(min_restart, S.shape[1])))
            if cfg.k_prev and state.prev_coeffs is not None:
                keep.extend(state.prev_coeffs[:, i] for i in range(state.prev_coeffs.shape[1]))
            K = np.column_stack(keep)
            T = []
            for c in K.T:
                c, nc, n0 = _orth_against(c, [np.column_stack(T)] if T else [])
                if nc > 1e-8 * max(n0, 1e-300):
                    T.append(c / nc)
                if len(T) >= max_basis - nb:
                    break
            T = np.column_stack(T)
            _transform(state, T)
            cur = T.T @ Yc
            history.annotate(f"restart to {state.size} vectors", mv())
        if cfg.k_prev:
            state.prev_coeffs = cur[:, : cfg.k_prev].copy()

        new = []
        for t in corr:
            if state.size + len(new) >= n - state.D.shape[1]:
                break  # basis already spans the deflated space
            blocks = [state.D, state.V] + ([np.column_stack(new)] if new else [])
            x, nx, n0 = _orth_against(t, blocks)
            if n0 == 0.0 or nx <= 1e-12 * n0 or not np.isfinite(nx):
                history.annotate("correction in span of basis; random restart direction", mv())
                x = _random_direction(n, blocks, rng)
                nx = 1.0
            new.append(x / nx)
        if new:
            _append(state, op, new, refined, rng)
