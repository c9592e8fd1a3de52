"""Two-stage singular value solver.

Stage 1 runs the eigensolver on ``C = A^T A`` with a per-target tolerance
that never asks for more than the squared-conditioning floor allows.  Stage
2 refines the remaining targets on ``B = [0 A^T; A 0]`` with a refined
projection around fixed shifts, until the left and right residuals meet the
user tolerance.  A dynamic variant alternates short runs on ``C`` and ``B``
to pick the approach that suits the given preconditioners.

All stage functions work on the tall orientation of ``A`` (``m >= n``);
:func:`phsvds_solve` transposes wide inputs and swaps ``u`` and ``v`` back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dense import EPS, dense_sym_eig
from .eigensolver import EigConfig, EigResult, gd_plus_k_solve
from .errors import ContractError, NotConvergedError
from .history import ConvergenceHistory
from .operators import (MatvecCounter, augmented_operator, normal_operator, oriented,
                        shift_invert_operator)
from .sparse import SparseMatrix, spmv, spmv_t

SQRT_EPS = math.sqrt(EPS)


@dataclass
class SvdConfig:
    k: int = 1
    which: str = "smallest"
    tol: float = 1e-10
    stage2_method: str = "jdqmr"
    block_size: int = 1
    max_basis: int = 35
    min_restart: int = 21
    k_prev: int = 1
    max_matvecs: int = 1_000_000
    max_inner: int | None = None
    precond_C: Callable | None = None
    precond_B: Callable | None = None
    post_rayleigh_ritz: bool | None = None  # None: on when k > 1 and stage 2 runs
    dynamic_switching: bool = False
    init_iter: int = 50
    max_switch: int = 6
    seed: int = 0
    initial_guess: np.ndarray | None = None
    random_guess: bool = False
    shift_invert: str | None = None  # None, "qr_of_A" or "lu_of_B"
    stage2_only: bool = False
    instrument: Callable | None = None

    def validate(self):
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if not self.tol > 0:
            raise ContractError("tol must be positive")
        if self.which not in ("smallest", "largest"):
            raise ContractError(f"unknown which={self.which!r}")
        if self.stage2_method not in ("gd_plus_k", "jdqmr"):
            raise ContractError(f"unknown stage2_method={self.stage2_method!r}")
        if self.shift_invert not in (None, "qr_of_A", "lu_of_B"):
            raise ContractError(f"unknown shift_invert={self.shift_invert!r}")


@dataclass
class ResidualBundle:
    """Residual norms of an approximate triplet ``(sigma, u, v)``.

    ``r_v = ||A v - sigma u||``, ``r_u = ||A^T u - sigma v||``,
    ``r_C = ||A^T A v - sigma^2 v||`` and ``r_B`` the residual of ``[v; u]``
    as an eigenvector of ``B`` (normalized by ``||v||^2 + ||u||^2``).
    """

    r_u_norm: float
    r_v_norm: float
    r_C_norm: float
    r_B_norm: float

    @property
    def user(self):
        """``sqrt(r_u^2 + r_v^2)``, the quantity the stopping criterion bounds."""
        return math.hypot(self.r_u_norm, self.r_v_norm)

    @classmethod
    def from_triplet(cls, A: SparseMatrix, sigma, u, v, counter=None, with_rC=True, Av=None):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        fresh = Av is None
        if fresh:
            Av = spmv(A, v)
        Atu = spmv_t(A, u)
        r_v = float(np.linalg.norm(Av - sigma * u))
        r_u = float(np.linalg.norm(Atu - sigma * v))
        r_C = float(np.linalg.norm(spmv_t(A, Av) - sigma * sigma * v)) if with_rC else math.nan
        den = float(v @ v + u @ u)
        r_B = math.sqrt((r_u * r_u + r_v * r_v) / den) if den > 0 else math.inf
        if counter is not None and fresh:
            counter.add(1)  # one product with A; A^T products are not counted separately
        return cls(r_u, r_v, r_C, r_B)

    def to_dict(self):
        return {"r_u": self.r_u_norm, "r_v": self.r_v_norm, "r_C": self.r_C_norm,
                "r_B": self.r_B_norm}


@dataclass
class SingularTriplet:
    sigma: float
    u: np.ndarray
    v: np.ndarray
    status: str = "converged"  # converged, fully_converged, floor_converged, not_converged, ...


@dataclass
class Stage1Result:
    values: np.ndarray  # Ritz values of C
    vectors: np.ndarray  # n x p
    flags: list
    converged: bool
    op_norm_est: float  # estimate of ||C||
    eig: EigResult | None = None

    @property
    def sigmas(self):
        return np.sqrt(np.maximum(self.values, 0.0))

    @property
    def A_norm_est(self):
        return math.sqrt(max(self.op_norm_est, 0.0))


@dataclass
class SvdResult:
    triplets: list
    bundles: list
    history: ConvergenceHistory
    matvecs: int
    converged: bool
    A_norm_est: float
    stages: list = field(default_factory=list)
    decision: str | None = None

    def __iter__(self):
        return iter((self.triplets, self.bundles, self.history))

    @property
    def sigmas(self):
        return np.array([t.sigma for t in self.triplets])


# ---------------------------------------------------------------- helpers

def convergence_test(A_norm_est, bundle: ResidualBundle, delta_user) -> bool:
    """``sqrt(r_u^2 + r_v^2) < ||A|| * delta_user``."""
    return bundle.user < A_norm_est * delta_user


def dynamic_tolerance(delta_user, sigma_i, sigma_n):
    """Tolerance for a target on ``C``: ``max(delta * sigma_i / sigma_n, eps)``.

    Returns ``(delta_C, fully)`` where ``fully`` tells whether the user
    tolerance is reachable without the second stage.
    """
    ratio = sigma_i / sigma_n if sigma_n > 0 else 0.0
    d = delta_user * ratio
    return max(d, EPS), d >= EPS


def _a_products(A, X, counter):
    Y = spmv(A, X)
    counter.add(1 if X.ndim == 1 else X.shape[1])
    return Y


def _default_guess(n, cfg, rng):
    if cfg.initial_guess is not None:
        g = np.asarray(cfg.initial_guess, dtype=np.float64)
        return [g] if g.ndim == 1 else [g[:, i] for i in range(g.shape[1])]
    if cfg.random_guess:
        return [rng.standard_normal(n)]
    return [np.ones(n)]


def _eig_config(cfg: SvdConfig, **kw):
    base = dict(max_basis=cfg.max_basis, min_restart=cfg.min_restart, k_prev=cfg.k_prev,
                block_size=min(cfg.block_size, cfg.k), max_inner=cfg.max_inner, seed=cfg.seed)
    base.update(kw)
    n = base.pop("dim", None)
    if n is not None:
        base["max_basis"] = min(base["max_basis"], n)
        room = base["max_basis"] - base["k_prev"] - base["block_size"]
        if room < 1:
            base["k_prev"] = 0
            base["block_size"] = 1
            room = base["max_basis"] - 1
        base["min_restart"] = max(1, min(base["min_restart"], room))
    return EigConfig(**base)


def _mv_clock(counter, offset=0):
    return lambda: counter.count + offset


# ---------------------------------------------------------------- stage 1

def stage1_normal(A: SparseMatrix, cfg: SvdConfig, prec_C=None, *, counter=None,
                  history=None, guesses=None, max_outer=None, max_matvecs=None,
                  num_wanted=None, locked=None, norm_floor=0.0) -> Stage1Result:
    """Eigensolver on ``C = A^T A`` with the per-target dynamic tolerance.

    For each target ``delta_C = max(delta * s_i / s_n, eps)`` is recomputed
    every outer iteration from the current target Ritz value and the largest
    Ritz value seen.  Non-convergence is reported through ``converged=False``
    together with whatever was locked.  ``locked=(values, vectors)`` carries
    pairs converged in an earlier run: they are deflated from the start and
    merged into the result.  ``norm_floor`` is a known lower bound on ``||C||``.
    """
    A, _ = oriented(A)
    n = A.ncols
    counter = MatvecCounter() if counter is None else counter
    history = ConvergenceHistory(seed=cfg.seed) if history is None else history
    rng = np.random.default_rng(cfg.seed)
    k = cfg.k if num_wanted is None else num_wanted
    if k > n:
        raise ContractError(f"k={k} exceeds min(m, n)={n}")
    op = normal_operator(A, counter)
    delta = cfg.tol

    lv, lx = (np.zeros(0), np.zeros((n, 0))) if locked is None else (
        np.asarray(locked[0], dtype=np.float64), np.asarray(locked[1], dtype=np.float64).reshape(n, -1))
    k_run = k - lv.size

    def test(theta, x, rn, est, idx):
        est = max(est, norm_floor)
        if est <= 0.0:
            return rn == 0.0
        dC, _ = dynamic_tolerance(delta, math.sqrt(max(theta, 0.0)), math.sqrt(est))
        return rn <= dC * est

    def metric(theta, rn):
        s = math.sqrt(max(theta, 0.0))
        return rn / s if s > 0 else rn

    instr = None
    if cfg.instrument is not None:
        def instr(info):
            cfg.instrument(dict(info, stage="C", A=A))

    ecfg = _eig_config(cfg, dim=n, tol=delta,
                       which="smallest_algebraic" if cfg.which == "smallest" else "largest_algebraic",
                       method="gd_plus_k", max_outer=max_outer, stage="C",
                       max_matvecs=cfg.max_matvecs if max_matvecs is None else max_matvecs)
    if guesses is None:
        guesses = _default_guess(n, cfg, rng)
    try:
        res = gd_plus_k_solve(op, prec_C, ecfg, guesses, k_run, convergence_test=test,
                              metric=metric, deflate=lx if lv.size else None, history=history,
                              mv=_mv_clock(counter), callback=instr)
        converged = res.converged
    except NotConvergedError as exc:
        res = exc.partial
        converged = False
        history.annotate("stage 1 stopped: matvec budget exhausted", counter.count)
    est = max(res.op_norm_est, norm_floor)
    if lv.size:
        vals = np.concatenate([lv, res.values])
        order = np.argsort(vals if cfg.which == "smallest" else -vals, kind="stable")
        res.values = vals[order]
        res.vectors = np.column_stack([lx, res.vectors])[:, order]
        res.flags = [(["locked"] * lv.size + list(res.flags))[i] for i in order]
        res.residual_norms = np.concatenate([np.zeros(lv.size), res.residual_norms])[order]
    flags = []
    for th, how in zip(res.values, res.flags):
        _, fully = dynamic_tolerance(delta, math.sqrt(max(th, 0.0)), math.sqrt(est) if est > 0 else 1.0)
        flags.append("fully_converged" if fully else "floor_converged")
    return Stage1Result(res.values, res.vectors, flags, converged, est, res)


def post_rayleigh_ritz(A: SparseMatrix, vectors, counter=None):
    """Rayleigh-Ritz of ``C`` on the span of converged right vectors.

    The projection is formed as ``(A Y)^T (A Y)`` from fresh products, so the
    new Ritz values carry relative rather than absolute rounding errors.
    Returns ``(values, vectors)`` ascending.
    """
    A, _ = oriented(A)
    counter = MatvecCounter() if counter is None else counter
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    Y, _ = np.linalg.qr(X)
    AY = _a_products(A, Y, counter)
    G = AY.T @ AY
    theta, S = dense_sym_eig(0.5 * (G + G.T))
    return np.maximum(theta, 0.0), Y @ S


def build_stage2_inputs(A: SparseMatrix, vectors, sigmas, A_norm_est, *, seed=0, counter=None):
    """Initial vectors ``[v; A v / sigma]`` (normalized) and shifts for stage 2.

    When ``sigma <= ||A|| sqrt(eps)`` the product ``A v / sigma`` carries no
    correct digits; a seeded random unit ``u``, orthogonal to the previous
    left guesses, is used instead.  Shifts are kept strictly positive.
    """
    A, _ = oriented(A)
    m, n = A.shape
    counter = MatvecCounter() if counter is None else counter
    rng = np.random.default_rng(seed)
    X = np.asarray(vectors, dtype=np.float64).reshape(n, -1)
    sigmas = np.asarray(sigmas, dtype=np.float64).ravel()
    guesses, shifts, us = [], [], []
    floor = max(A_norm_est, 1e-300) * EPS
    for i in range(X.shape[1]):
        v = X[:, i] / np.linalg.norm(X[:, i])
        s = float(sigmas[i])
        if s > A_norm_est * SQRT_EPS:
            u = _a_products(A, v, counter) / s
        else:
            u = rng.standard_normal(m)
            for _ in range(2):
                for w in us:
                    u -= w * (w @ u)
        u = u / np.linalg.norm(u)
        us.append(u)
        g = np.concatenate([v, u])
        guesses.append(g / np.linalg.norm(g))
        shifts.append(max(s, floor))
    return guesses, shifts


# ---------------------------------------------------------------- stage 2

def _unpack(A, x, counter=None):
    n = A.ncols
    v, u = x[:n], x[n:]
    nv, nu = np.linalg.norm(v), np.linalg.norm(u)
    if nv == 0.0 or nu == 0.0:
        return None
    v, u = v / nv, u / nu
    Av = spmv(A, v)
    if counter is not None:
        counter.add(1)
    s = float(u @ Av)
    if s < 0.0:
        u, s = -u, -s
    return s, u, v


def stage2_augmented(A: SparseMatrix, cfg: SvdConfig, prec_B, guesses, shifts, *,
                     counter=None, history=None, A_norm_est=None, max_outer=None,
                     max_matvecs=None, method=None, target="shifts", krylov_fill=True):
    """Refine triplets on ``B`` around the shifts.

    Runs the eigensolver with refined extraction and ``closest_to_shifts``
    ordering.  ``target="geq_zero"`` instead asks for the smallest
    nonnegative eigenvalues with Rayleigh-Ritz extraction, for runs whose
    shifts are not trustworthy (the shifts then only seed the screen).
      A target locks when a fresh residual evaluation satisfies the
    user criterion; the mirror vector ``[v; -u]`` is deflated with it so the
    ``-sigma`` eigenvector is never found twice.  Returns
    ``(triplets, converged, eig_result)``.
    """
    A, _ = oriented(A)
    m, n = A.shape
    counter = MatvecCounter() if counter is None else counter
    history = ConvergenceHistory(seed=cfg.seed) if history is None else history
    if A_norm_est is None:
        A_norm_est = estimate_norm(A, counter=counter)
    delta = cfg.tol
    op = augmented_operator(A, counter)
    k = len(shifts)
    guesses = [np.asarray(g, dtype=np.float64) for g in guesses]
    # largest shifts first: their guesses are the most accurate, and locking them
    # (with their mirrors) clears the region near zero for the tiny targets
    order = sorted(range(k), key=lambda i: -shifts[i])
    shifts = [shifts[i] for i in order]
    guesses = [guesses[i] for i in order if i < len(guesses)] + guesses[k:]

    def test(theta, x, rn, est, idx):
        # cheap screen: the user metric is about sqrt(2) * rn for balanced halves.
        # A mix of the +sigma and -sigma eigenvectors has a B-residual near sigma
        # yet unpacks to an exact triplet, hence the allowance for tiny targets.
        slack = 2.0 * max(abs(theta), shifts[min(idx, k - 1)])
        if slack > 1e3 * A_norm_est * SQRT_EPS:
            slack = 0.0
        if math.sqrt(2.0) * rn > 4.0 * delta * A_norm_est + slack:
            return False
        xs = x / np.linalg.norm(x)
        got = _unpack(A, xs, counter)
        if got is None:
            return False
        s, u, v = got
        b = ResidualBundle.from_triplet(A, s, u, v, counter, with_rC=False)
        return convergence_test(A_norm_est, b, delta)

    def partner(x):
        return np.concatenate([x[:n], -x[n:]])

    def metric(theta, rn):
        return math.sqrt(2.0) * rn

    instr = None
    if cfg.instrument is not None:
        def instr(info):
            cfg.instrument(dict(info, stage="B", A=A))

    if target == "geq_zero":
        which, extraction, eshifts = "closest_geq", "rayleigh_ritz", (0.0,)
    else:
        which, extraction, eshifts = "closest_to_shifts", "refined", tuple(shifts)
    ecfg = _eig_config(cfg, dim=m + n, tol=delta, which=which,
                       shifts=eshifts, extraction=extraction,
                       method=cfg.stage2_method if method is None else method,
                       max_outer=max_outer, stage="B", krylov_fill=krylov_fill,
                       max_matvecs=cfg.max_matvecs if max_matvecs is None else max_matvecs)
    ecfg.block_size = 1 if ecfg.block_size > k else ecfg.block_size
    try:
        res = gd_plus_k_solve(op, prec_B, ecfg, guesses, k, convergence_test=test, metric=metric,
                              partner=partner, history=history, mv=_mv_clock(counter),
                              callback=instr)
        converged = res.converged
    except NotConvergedError as exc:
        res = exc.partial
        converged = False
        history.annotate("stage 2 stopped: matvec budget exhausted", counter.count)
    triplets = []
    for i in range(res.vectors.shape[1]):
        got = _unpack(A, res.vectors[:, i], counter)
        if got is None:
            continue
        s, u, v = got
        triplets.append(SingularTriplet(s, u, v, res.flags[i]))
    return triplets, converged, res


# ---------------------------------------------------------------- norm estimate

def estimate_norm(A: SparseMatrix, steps=20, counter=None, seed=0):
    """``||A||_2`` from a short Lanczos run on ``A^T A`` (a lower bound)."""
    from .baselines import lanczos_unrestarted

    A, _ = oriented(A)
    op = normal_operator(A, counter)
    v0 = np.ones(A.ncols)
    out = lanczos_unrestarted(op, v0, min(steps, A.ncols), extraction="largest")
    return math.sqrt(max(out.values[-1], 0.0))


# ---------------------------------------------------------------- driver

def _finish(A, transposed, triplets, counter, history, converged, norm_est, stages, decision,
            cfg, matvec_base=0):
    bundles = []
    out = []
    for t in triplets:
        b = ResidualBundle.from_triplet(A, t.sigma, t.u, t.v, counter)
        status = t.status
        if status != "not_converged" and not convergence_test(norm_est, b, cfg.tol) \
                and not status.startswith("floor") and cfg.shift_invert is None:
            status = "not_converged"
        u, v = (t.v, t.u) if transposed else (t.u, t.v)
        out.append(SingularTriplet(t.sigma, u, v, status))
        bundles.append(b)
    order = np.argsort([t.sigma for t in out], kind="stable")
    if cfg.which == "largest":
        order = order[::-1]
    out = [out[i] for i in order]
    bundles = [bundles[i] for i in order]
    return SvdResult(out, bundles, history, counter.count, converged, norm_est, stages, decision)


def _stage1_triplets(A, s1: Stage1Result, counter):
    trip = []
    for i in range(s1.vectors.shape[1]):
        v = s1.vectors[:, i] / np.linalg.norm(s1.vectors[:, i])
        Av = _a_products(A, v, counter)
        s = float(np.linalg.norm(Av))
        u = Av / s if s > 0 else np.zeros(A.nrows)
        trip.append(SingularTriplet(s, u, v, s1.flags[i]))
    return trip


def phsvds_solve(A: SparseMatrix, cfg: SvdConfig | None = None, **kw) -> SvdResult:
    """Compute ``cfg.k`` extreme singular triplets of ``A``.

    Stage 1 on ``C`` always runs (except in ``stage2_only`` mode); targets
    that stage 1 cannot resolve to the user tolerance go through stage 2 on
    ``B``.  The result unpacks as ``(triplets, bundles, history)``; its
    ``converged`` flag is false when the matvec budget ran out, in which case
    the best available triplets are still returned.
    """
    cfg = replace(cfg or SvdConfig(), **kw)
    cfg.validate()
    if cfg.dynamic_switching:
        return dynamic_switch_solve(A, cfg, cfg.precond_C, cfg.precond_B)
    At, transposed = oriented(A)
    m, n = At.shape
    if cfg.k > n:
        raise ContractError(f"k={cfg.k} exceeds min(m, n)={n}")
    counter = MatvecCounter()
    history = ConvergenceHistory(seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    if cfg.shift_invert is not None:
        return _shift_invert_solve(At, transposed, cfg, counter, history)

    if cfg.stage2_only:
        norm_est = estimate_norm(At, counter=counter)
        history.annotate(f"norm estimate {norm_est:.6e} from 20 Lanczos steps", counter.count)
        g = _default_guess(n, cfg, rng)
        trip, conv, _ = _stage2_from_vectors(At, cfg, g, None, norm_est, counter, history)
        return _finish(At, transposed, trip, counter, history, conv, norm_est, ["B"], None, cfg)

    s1 = stage1_normal(At, cfg, cfg.precond_C, counter=counter, history=history)
    norm_est = s1.A_norm_est
    history.annotate(f"stage 1 done: {len(s1.flags)} pairs, {counter.count} MV", counter.count)
    trip1 = _stage1_triplets(At, s1, counter)
    if not s1.converged:
        return _finish(At, transposed, trip1, counter, history, False, norm_est, ["C"], None, cfg)
    need = [i for i, f in enumerate(s1.flags) if f != "fully_converged"]
    if cfg.which == "largest" or not need:
        return _finish(At, transposed, trip1, counter, history, True, norm_est, ["C"], None, cfg)
    budget = cfg.max_matvecs - counter.count
    trip2, conv, _ = _stage2_from_vectors(At, cfg, s1.vectors, None, norm_est, counter, history,
                                          keep=[t for i, t in enumerate(trip1) if i not in need],
                                          need=need, max_matvecs=budget)
    return _finish(At, transposed, trip2, counter, history, conv, norm_est, ["C", "B"], None, cfg)


def _stage2_from_vectors(At, cfg, vectors, sigmas, norm_est, counter, history, keep=(),
                         need=None, max_matvecs=None, target="shifts"):
    """Post-process the right vectors, build guesses/shifts and run stage 2."""
    X = np.column_stack(vectors) if isinstance(vectors, list) else np.asarray(vectors)
    if need is None:
        need = list(range(min(X.shape[1], cfg.k)))
    k2 = len(need)
    post = cfg.post_rayleigh_ritz
    if post is None:
        post = X.shape[1] > 1
    if post and X.shape[1] > 1:
        theta, V = post_rayleigh_ritz(At, X, counter)
        history.annotate("Rayleigh-Ritz on converged vectors of C", counter.count)
        sig = np.sqrt(theta)
        if keep:
            # retain the targets already resolved in stage 1, refine the others
            sig, V = sig[need], V[:, need]
    else:
        V = X[:, need] if X.shape[1] >= max(need) + 1 else X
        if sigmas is None:
            AV = _a_products(At, V, counter)
            sig = np.linalg.norm(AV.reshape(At.nrows, -1), axis=0)
        else:
            sig = np.asarray(sigmas)[need]
    if V.shape[1] < cfg.k - len(keep):
        # not enough vectors (stage2_only): pad targets with the same guess
        sig = np.resize(sig, cfg.k - len(keep))
    guesses, shifts = build_stage2_inputs(At, V, sig, norm_est, seed=cfg.seed, counter=counter)
    shifts = shifts[: cfg.k - len(keep)]
    if len(shifts) < cfg.k - len(keep):
        shifts = shifts + [shifts[-1]] * (cfg.k - len(keep) - len(shifts))
    tr, conv, _ = stage2_augmented(At, cfg, cfg.precond_B, guesses, shifts, counter=counter,
                                   history=history, A_norm_est=norm_est,
                                   max_matvecs=max_matvecs, target=target)
    return list(keep) + tr, conv, None


# ---------------------------------------------------------------- shift-invert

def _shift_invert_solve(At, transposed, cfg, counter, history):
    """Largest eigenvalues of a dense-factorized inverse, stage 1 only."""
    m, n = At.shape
    op = shift_invert_operator(At, mode=cfg.shift_invert, counter=counter)
    rng = np.random.default_rng(cfg.seed)
    if cfg.shift_invert == "qr_of_A":
        dim = n
        guesses = _default_guess(n, cfg, rng)
    else:
        dim = m + n
        guesses = []
        for g in _default_guess(n, cfg, rng):
            Ag = _a_products(At, g, counter)
            guesses.append(np.concatenate([g, Ag / max(np.linalg.norm(Ag), 1e-300)]))
    delta = cfg.tol
    norm_est = [op.A_norm]
    history.annotate(f"||A||_2 = {op.A_norm:.6e} from the dense factorization", counter.count)

    def test(theta, x, rn, est, idx):
        if rn > delta * est:
            return False
        if cfg.shift_invert == "qr_of_A":
            v = x / np.linalg.norm(x)
            Av = _a_products(At, v, counter)
            s = float(np.linalg.norm(Av))
            if s == 0.0:
                return False
            b = ResidualBundle.from_triplet(At, s, Av / s, v, counter, with_rC=False, Av=Av)
        else:
            got = _unpack(At, x / np.linalg.norm(x), counter)
            if got is None:
                return False
            s, u, v = got
            b = ResidualBundle.from_triplet(At, s, u, v, counter, with_rC=False)
        a = max(norm_est[0], estimate_norm_cached(At, counter, norm_est))
        return convergence_test(a, b, delta)

    ecfg = _eig_config(cfg, dim=dim, tol=delta, which="largest_algebraic", method="gd_plus_k",
                       stage="C", max_matvecs=cfg.max_matvecs, block_size=1)
    try:
        res = gd_plus_k_solve(op, None, ecfg, guesses, cfg.k, convergence_test=test,
                              history=history, mv=_mv_clock(counter))
        converged = res.converged
    except NotConvergedError as exc:
        res = exc.partial
        converged = False
    trip = []
    for i in range(res.vectors.shape[1]):
        x = res.vectors[:, i]
        if cfg.shift_invert == "qr_of_A":
            v = x / np.linalg.norm(x)
            Av = _a_products(At, v, counter)
            s = float(np.linalg.norm(Av))
            trip.append(SingularTriplet(s, Av / s, v, "converged"))
        else:
            got = _unpack(At, x, counter)
            if got is not None:
                trip.append(SingularTriplet(got[0], got[1], got[2], "converged"))
    a = max(norm_est[0], estimate_norm_cached(At, counter, norm_est))
    return _finish(At, transposed, trip, counter, history, converged, a, ["inverse"], None, cfg)


def estimate_norm_cached(At, counter, cache):
    if cache[0] == 0.0:
        cache[0] = estimate_norm(At, counter=counter)
    return cache[0]


# ---------------------------------------------------------------- dynamic switching

@dataclass
class _Probe:
    side: str
    rate: float
    found: int
    guesses_C: list
    sigmas: np.ndarray
    triplets: list | None = None


def _run_rate(history, start):
    from .analysis import empirical_rate

    entries = history.entries[start:]
    if len(entries) < 2:
        return 1.0
    # first unconverged target of the run
    last = entries[-1].target_index
    sel = [e for e in entries if e.target_index == last and not e.locked]
    if len(sel) < 2:
        sel = [e for e in entries if not e.locked]
    window = max(10, len(sel) // 2)
    sub = ConvergenceHistory()
    for e in sel[-window:]:
        sub.entries.append(e)
    try:
        return empirical_rate(sub, window)
    except ValueError:
        return 1.0


def dynamic_switch_solve(A: SparseMatrix, cfg: SvdConfig, prec_C=None, prec_B=None) -> SvdResult:
    """Alternate GD+k runs on ``C`` and ``B`` and continue with the faster one.

    Two probes of ``init_iter`` iterations each (``C`` first) give initial
    convergence rates.  Runs then continue on the estimated faster side, with
    ``maxIter = init_iter * 2**j`` (``j`` grows by one when the same side is
    chosen again and is halved on a switch), until a target converges during
    the probes, two targets converge later, or ``max_switch`` runs were made.
    Approximations of each run seed the next one.
    """
    cfg = replace(cfg, dynamic_switching=False)
    cfg.validate()
    prec_C = cfg.precond_C if prec_C is None else prec_C
    prec_B = cfg.precond_B if prec_B is None else prec_B
    cfg = replace(cfg, precond_C=prec_C, precond_B=prec_B)
    At, transposed = oriented(A)
    m, n = At.shape
    if cfg.which != "smallest":
        return phsvds_solve(A, replace(cfg, precond_C=prec_C))
    counter = MatvecCounter()
    history = ConvergenceHistory(seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    k = cfg.k
    guesses_C = _default_guess(n, cfg, rng)
    norm_est = [0.0]

    def run_C(max_iter, guesses):
        start = len(history.entries)
        s1 = stage1_normal(At, cfg, prec_C, counter=counter, history=history, guesses=guesses,
                           max_outer=max_iter, max_matvecs=cfg.max_matvecs - counter.count)
        for e in history.entries[start:]:
            e.annotations.append("dynamic run on C")
        norm_est[0] = max(norm_est[0], s1.A_norm_est)
        eres = s1.eig
        vecs = [s1.vectors[:, i] for i in range(s1.vectors.shape[1])]
        sig = list(s1.sigmas)
        if eres.approx_vectors is not None:
            vecs += [eres.approx_vectors[:, i] for i in range(eres.approx_vectors.shape[1])]
            sig += list(np.sqrt(np.maximum(eres.approx_values, 0.0)))
        p = _Probe("C", _run_rate(history, start), len(s1.flags), vecs[:k] or guesses,
                   np.array(sig[:k]))
        p.stage1 = s1
        return p

    def run_B(max_iter, guesses, sig):
        start = len(history.entries)
        a = norm_est[0] if norm_est[0] > 0 else estimate_norm_cached(At, counter, norm_est)
        X = np.column_stack(guesses)
        if sig is None or len(sig) < X.shape[1]:
            AX = _a_products(At, X, counter)
            sig = np.linalg.norm(AX.reshape(m, -1), axis=0)
        g, shifts = build_stage2_inputs(At, X, sig, a, seed=cfg.seed, counter=counter)
        shifts = (shifts + [shifts[-1]] * k)[:k]
        trip, conv, eres = stage2_augmented(At, replace(cfg, stage2_method="gd_plus_k"), prec_B,
                                            g, shifts, counter=counter, history=history,
                                            A_norm_est=a, max_outer=max_iter,
                                            max_matvecs=cfg.max_matvecs - counter.count,
                                            target="geq_zero", krylov_fill=False)
        for e in history.entries[start:]:
            e.annotations.append("dynamic run on B")
        vecs = [t.v for t in trip]
        sig2 = [t.sigma for t in trip]
        if eres.approx_vectors is not None:
            for i in range(eres.approx_vectors.shape[1]):
                x = eres.approx_vectors[:, i]
                v = x[:n]
                if np.linalg.norm(v) > 0:
                    vecs.append(v / np.linalg.norm(v))
                    sig2.append(abs(float(eres.approx_values[i])))
        p = _Probe("B", _run_rate(history, start), len(trip), vecs[:k] or guesses,
                   np.array(sig2[:k]), trip)
        return p

    init = cfg.init_iter
    # probes: C first, then B seeded from C
    pC = run_C(init, guesses_C)
    lastC = pC
    pB = run_B(init, pC.guesses_C, pC.sigmas)
    history.switches.append({"probe": "C", "rate": pC.rate, "found": pC.found})
    history.switches.append({"probe": "B", "rate": pB.rate, "found": pB.found})
    rates = {"C": pC.rate, "B": pB.rate}
    num_converged = pC.found + pB.found
    last = pB
    num_switch = 0
    j = 0
    undecided = True
    prev_choice = None
    while num_switch < cfg.max_switch and undecided and last.found < k:
        choice = "C" if rates["C"] < rates["B"] else "B"
        if (num_switch == 0 and num_converged > 0) or num_converged > 1:
            undecided = False
        else:
            if prev_choice is not None and choice == prev_choice:
                j += 1
            elif prev_choice is not None:
                j = j // 2
            else:
                j = j + 1 if choice == last.side else j // 2
        max_iter = init * 2 ** j
        num_switch += 1
        history.switches.append({"choice": choice, "max_iter": max_iter, "j": j,
                                 "num_converged": num_converged, "decided": not undecided,
                                 "matvecs": counter.count})
        prev_choice = choice
        if not undecided:
            break
        if choice == "C":
            last = run_C(max_iter, last.guesses_C)
            lastC = last
        else:
            last = run_B(max_iter, last.guesses_C, last.sigmas)
        rates[choice] = last.rate
        num_converged += last.found
        if counter.count >= cfg.max_matvecs:
            break
    faster = "C" if rates["C"] < rates["B"] else "B"
    if undecided and num_switch >= cfg.max_switch:
        history.annotate(f"max_switch reached undecided; continuing on {faster}", counter.count)

    remaining = cfg.max_matvecs - counter.count
    a = max(norm_est[0], 0.0) or estimate_norm_cached(At, counter, norm_est)
    if last.side == "B" and last.found >= k:
        decision = "all found on B"
        trip = last.triplets
        conv = True
    elif last.side == "C" and last.found >= k:
        decision = "all found on C; refine on B"
        s1 = last.stage1
        need = [i for i, f in enumerate(s1.flags) if f != "fully_converged"]
        trip1 = _stage1_triplets(At, s1, counter)
        if need:
            trip, conv, _ = _stage2_from_vectors(
                At, cfg, s1.vectors, None, a, counter, history,
                keep=[t for i, t in enumerate(trip1) if i not in need], need=need,
                max_matvecs=remaining)
        else:
            trip, conv = trip1, True
    elif faster == "C":
        decision = "two-stage"
        # pairs locked by the latest C run stay deflated; the rest start from
        # the newest approximations
        prev = lastC.stage1
        seeds = []
        if prev.eig is not None and prev.eig.ritz_vectors is not None:
            rx = prev.eig.ritz_vectors
            seeds = [rx[:, i] for i in range(min(rx.shape[1], k - len(prev.flags)))]
        seeds += list(last.guesses_C) if last is not lastC else []
        s1 = stage1_normal(At, cfg, prec_C, counter=counter, history=history,
                           guesses=seeds, max_matvecs=remaining,
                           locked=(prev.values, prev.vectors), norm_floor=prev.op_norm_est)
        a = max(a, s1.A_norm_est)
        trip1 = _stage1_triplets(At, s1, counter)
        need = [i for i, f in enumerate(s1.flags) if f != "fully_converged"]
        if not s1.converged:
            trip, conv = trip1, False
        elif need:
            trip, conv, _ = _stage2_from_vectors(
                At, cfg, s1.vectors, None, a, counter, history,
                keep=[t for i, t in enumerate(trip1) if i not in need], need=need,
                max_matvecs=cfg.max_matvecs - counter.count)
        else:
            trip, conv = trip1, True
    else:
        decision = "augmented only"
        X = np.column_stack(last.guesses_C)
        trip, conv, _ = _stage2_from_vectors(At, replace(cfg, post_rayleigh_ritz=False), X,
                                             last.sigmas if len(last.sigmas) else None, a,
                                             counter, history, max_matvecs=remaining,
                                             target="geq_zero")
    history.switches.append({"decision": decision, "faster": faster, "switches": num_switch})
    return _finish(At, transposed, trip, counter, history, conv, a,
                   ["dynamic"], decision, cfg)
