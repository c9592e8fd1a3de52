"""Convergence-rate bounds, spectrum gap statistics and eigenvector diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dense import EPS
from .errors import ContractError


class DegenerateSpectrumError(ContractError):
    pass


class InvalidRegimeError(ContractError):
    """First-order rate expansion requested outside its range of validity."""


def _sorted(sigma):
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.size and (np.any(s < 0) or np.any(np.diff(s) < 0)):
        raise ContractError("singular values must be nonnegative and ascending")
    return s


def gap_ratios_largest(sigma):
    """Gap ratios of the largest value on ``B`` and on ``C``.

    ``gamma_B = (s_n - s_{n-1}) / (s_{n-1} + s_n)`` and
    ``gamma_C = (s_n^2 - s_{n-1}^2) / (s_{n-1}^2 - s_1^2)``.
    Returns ``(gamma_B, gamma_C, sqrt(gamma_C / gamma_B))``.
    """
    s = _sorted(sigma)
    if s.size < 3:
        raise DegenerateSpectrumError("need at least three values")
    s1, sm, sn = s[0], s[-2], s[-1]
    if sm == s1:
        raise DegenerateSpectrumError("s_{n-1} == s_1: gamma_C undefined")
    gB = (sn - sm) / (sm + sn)
    # factored forms keep relative accuracy when s_{n-1} ~ s_n
    gC = (sn - sm) * (sn + sm) / ((sm - s1) * (sm + s1))
    ratio = math.sqrt(gC / gB) if gB > 0 else math.inf
    return gB, gC, ratio


def gamma_smallest(sigma):
    """``(s_2^2 - s_1^2) / (s_n^2 - s_2^2)``."""
    s = _sorted(sigma)
    s1, s2, sn = s[0], s[1], s[-1]
    den = (sn - s2) * (sn + s2)
    if den == 0:
        raise DegenerateSpectrumError("s_n == s_2")
    return (s2 - s1) * (s2 + s1) / den


@dataclass
class AugmentedBound:
    rho: float
    rho_interval: float
    a: float
    b: float
    c: float
    d: float


def rate_bound_augmented(sigma) -> AugmentedBound:
    """Asymptotic rate bound of a Krylov method on ``B`` for the smallest value.

    ``rho = 1 - sqrt(gamma * 2 s_1/(s_2 + s_1) * (s_n^2 - s_2^2)/(s_n^2 - s_1^2))``,
    checked against ``1 - sqrt(bc / (ad))`` on the shifted spectrum
    ``[-s_n - s_1, -2 s_1] U [s_2 - s_1, s_n - s_1]``.
    """
    s = _sorted(sigma)
    s1, s2, sn = s[0], s[1], s[-1]
    if s1 <= 0:
        raise ContractError("s_1 must be positive")
    if not s2 > s1:
        raise DegenerateSpectrumError("need s_1 < s_2")
    g = gamma_smallest(s) if sn > s2 else 0.0
    if sn > s2:
        inner = g * 2 * s1 / (s2 + s1) * ((sn - s2) * (sn + s2)) / ((sn - s1) * (sn + s1))
    else:
        inner = 2 * s1 * (s2 - s1) / ((sn + s1) * (sn - s1))
    a = sn + s1
    b = 2 * s1
    c = s2 - s1
    d = sn - s1
    rho = 1.0 - math.sqrt(inner)
    rho2 = 1.0 - math.sqrt(b * c / (a * d))
    return AugmentedBound(rho, rho2, -a, -b, c, d)


@dataclass
class NormalBound:
    q: float | None
    q_exp: float
    gamma: float
    valid: bool


def rate_bound_normal(sigma) -> NormalBound:
    """``q = 1 - 2 sqrt(gamma)`` for Krylov on ``C``, valid for ``gamma < 1/4``.

    ``q_exp = exp(-2 sqrt(gamma))`` is reported alongside; ``q`` is ``None``
    when out of range.
    """
    g = gamma_smallest(sigma)
    valid = g < 0.25
    return NormalBound(1.0 - 2.0 * math.sqrt(g) if valid else None,
                       math.exp(-2.0 * math.sqrt(g)), g, valid)


def speedup_tau(sigma):
    """``tau = rho / q``: how much slower per step ``B`` is than ``C``."""
    nb = rate_bound_normal(sigma)
    if not nb.valid:
        raise InvalidRegimeError(f"gamma = {nb.gamma:.3g} >= 1/4; first-order rates invalid")
    return rate_bound_augmented(sigma).rho / nb.q


@dataclass
class SpectrumSummary:
    sigma: np.ndarray
    gamma_B: float | None
    gamma_C: float | None
    gamma: float | None
    gamma_m: dict
    rho: float | None
    q: float | None
    tau: float | None
    valid: bool
    reason: str | None = None

    def to_dict(self):
        return {
            "kappa": float(self.sigma[-1] / self.sigma[0]) if self.sigma[0] > 0 else None,
            "norm": float(self.sigma[-1]),
            "gamma_B": self.gamma_B, "gamma_C": self.gamma_C, "gamma": self.gamma,
            "gamma_m": {str(k): v for k, v in self.gamma_m.items()},
            "rho": self.rho, "q": self.q, "tau": self.tau, "valid": self.valid,
            "reason": self.reason,
        }


def summarize_spectrum(sigma, ks=(1, 5, 10)) -> SpectrumSummary:
    s = _sorted(sigma)
    gm = {k: spectrum_gaps(s, k)[0] for k in ks if k <= s.size}
    try:
        gB, gC, _ = gap_ratios_largest(s)
    except DegenerateSpectrumError:
        gB = gC = None
    rho = q = tau = g = None
    valid, reason = False, None
    try:
        g = gamma_smallest(s)
        rho = rate_bound_augmented(s).rho
        nb = rate_bound_normal(s)
        if nb.valid:
            q, tau, valid = nb.q, rho / nb.q, True
        else:
            reason = "gamma >= 1/4"
    except ContractError as exc:
        reason = str(exc)
    return SpectrumSummary(s, gB, gC, g, gm, rho, q, tau, valid, reason)


def spectrum_gaps(sigma, k):
    """``gamma_m(k) = min_{i<=k} min_{j != i} |s_i - s_j|``.

    Returns ``(value, multiple)`` where ``multiple`` flags a repeated value
    (gap below ``eps * max|s|``), in which case the value is 0.
    """
    s = _sorted(sigma)
    if not 1 <= k <= s.size:
        raise ContractError("need 1 <= k <= len(sigma)")
    if s.size < 2:
        return math.inf, False
    d = np.diff(s)
    left = np.concatenate([[np.inf], d])
    right = np.concatenate([d, [np.inf]])
    g = float(np.min(np.minimum(left, right)[:k]))
    if g <= EPS * float(np.max(np.abs(s))):
        return 0.0, True
    return g, False


def empirical_rate(history, window=None):
    """Geometric mean of successive residual ratios over the last ``window`` entries.

    Entries flagged as locking steps are skipped, as are ratios that straddle
    them.  A zero residual gives rate 0.
    """
    entries = getattr(history, "entries", history)
    seq = []
    for e in entries:
        if getattr(e, "locked", False):
            seq.append(None)
        else:
            seq.append(float(e.residual_norm if hasattr(e, "residual_norm") else e))
    if window is not None:
        seq = seq[-window:]
    logs = []
    for a, b in zip(seq, seq[1:]):
        if a is None or b is None:
            continue
        if b == 0.0:
            return 0.0
        if a == 0.0:
            continue
        logs.append(math.log(b / a))
    if not logs:
        if any(x == 0.0 for x in seq if x is not None):
            return 0.0
        raise ValueError("need at least two consecutive unlocked entries")
    return math.exp(sum(logs) / len(logs))


@dataclass
class AngleReport:
    c: np.ndarray
    rq_error: float
    tail: float


def eigvec_angles(u, basis, eigenvalues=None):
    """Cosines ``c_i = u^T basis_i`` and the Rayleigh-quotient error they imply.

    With ``eigenvalues`` the error ``sum_{i>1} (c_i/c_1)^2 (lambda_i - lambda_1)
    / (1 + sum_{i>1} (c_i/c_1)^2)`` is returned (zero otherwise); ``tail`` is
    ``sum_{i>1} c_i^2``.
    """
    u = np.asarray(u, dtype=np.float64)
    Bm = np.column_stack(basis) if isinstance(basis, (list, tuple)) else np.asarray(basis)
    c = Bm.T @ u
    tail = float(np.sum(c[1:] ** 2))
    err = 0.0
    if eigenvalues is not None and c[0] != 0:
        lam = np.asarray(eigenvalues, dtype=np.float64)
        t = (c[1:] / c[0]) ** 2
        err = float(np.sum(t * (lam[1:] - lam[0])) / (1.0 + np.sum(t)))
    return AngleReport(c, err, tail)
