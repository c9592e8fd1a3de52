"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Expensive solves are module-scoped fixtures so that the residual-identity
and refined-extraction audits can reuse the instrumented runs.
"""

import json
import math
import os
import time

import numpy as np
import pytest

import phsvds.baselines as baselines_mod
import phsvds.operators as operators_mod
import phsvds.solver as solver_mod
from phsvds import cli
from phsvds.analysis import (gap_ratios_largest, gamma_smallest, rate_bound_augmented,
                             rate_bound_normal, speedup_tau)
from phsvds.baselines import lanczos_unrestarted, lbd_unrestarted
from phsvds.dense import EPS, jacobi_svd
from phsvds.eigensolver import (StaleFactorizationError, SubspaceState, _append,
                                refined_extract, refresh_qr)
from phsvds.generators import (clustered_diag, log_spaced, perturbed_diag_preconditioners,
                               random_orthogonal, random_sparse, wide_gap_diag)
from phsvds.operators import (augmented_operator, normal_operator, precond_for_B_from_M,
                              precond_for_C_from_M, shift_invert_operator)
from phsvds.solver import SvdConfig, dynamic_switch_solve, phsvds_solve
from phsvds.sparse import SparseMatrix, spmv, spmv_t


class Auditor:
    """Instrument hook checking residual identities on every iteration.

    Stage ``C`` iterates give ``v`` and ``sigma = sqrt(theta)``; with
    ``u = A v / sigma`` both identities are checked.  Stage ``B`` iterates
    give ``[v; u]`` and ``sigma = theta``; only the ``r_B`` identity applies
    there.  In refined mode the refined and Ritz residuals for the fixed
    shift are compared as well.
    """

    def __init__(self):
        self.norm = 1.0
        self.count = 0
        self.worst_C = 0.0
        self.worst_B = 0.0
        self.refined_count = 0
        self.refined_violation = 0.0
        self.monotone_violation = 0.0
        self.seconds = 0.0
        self._prev = None

    def start(self, A_norm):
        self.norm = float(A_norm)
        self._prev = None

    def __call__(self, info):
        t0 = time.perf_counter()
        A = info["A"]
        n = A.ncols
        x = np.asarray(info["x"], dtype=np.float64)
        theta = float(info["theta"])
        nrm2 = self.norm * self.norm
        if info["stage"] == "C":
            v = x / np.linalg.norm(x)
            s = math.sqrt(max(theta, 0.0))
            Av = spmv(A, v)
            r_C = np.linalg.norm(spmv_t(A, Av) - theta * v)
            if s > 0.0:
                u = Av / s
                r_u = np.linalg.norm(spmv_t(A, u) - s * v)
                self.worst_C = max(self.worst_C, abs(r_C - s * r_u) / nrm2)
                self._check_B(A, s, v, u)
        else:
            v, u = x[:n], x[n:]
            self._check_B(A, theta, v, u)
            self._check_refined(info)
        self.count += 1
        self.seconds += time.perf_counter() - t0

    def _check_B(self, A, s, v, u):
        r_v = np.linalg.norm(spmv(A, v) - s * u)
        r_u = np.linalg.norm(spmv_t(A, u) - s * v)
        z = np.concatenate([v, u])
        Bz = np.concatenate([spmv_t(A, u), spmv(A, v)])
        r_B = np.linalg.norm(Bz - s * z) / np.linalg.norm(z)
        rhs = (r_u ** 2 + r_v ** 2) / (v @ v + u @ u)
        self.worst_B = max(self.worst_B, abs(r_B ** 2 - rhs) / (self.norm * self.norm))

    def _check_refined(self, info):
        state = info["state"]
        if state.R is None:
            return
        try:
            _, _, sing = refined_extract(state)
        except StaleFactorizationError:
            self._prev = None
            return
        tau = state.target_shift
        M = state.W - tau * state.V
        theta, S = np.linalg.eigh(state.H)
        y = S[:, np.argmin(np.abs(theta - tau))]
        ritz = np.linalg.norm(M @ y)
        slack = 10 * EPS * self.norm
        self.refined_count += 1
        self.refined_violation = max(self.refined_violation, sing[0] - ritz - slack)
        key = (info["target_index"], tau)
        if self._prev is not None and self._prev[0] == key and state.size > self._prev[1]:
            # nested subspaces between restarts: the minimum cannot grow
            self.monotone_violation = max(self.monotone_violation,
                                          sing[0] - self._prev[2] - slack)
        self._prev = (key, state.size, sing[0])


AUDIT = Auditor()


def _timed_solve(A, cfg, A_norm):
    AUDIT.start(A_norm)
    spent = AUDIT.seconds
    t0 = time.perf_counter()
    res = phsvds_solve(A, cfg)
    wall = time.perf_counter() - t0 - (AUDIT.seconds - spent)
    return res, wall


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def clustered_run():
    A = clustered_diag()
    cfg = SvdConfig(k=10, tol=1e-15, block_size=2, instrument=AUDIT)
    res, wall = _timed_solve(A, cfg, 1.0)
    return A, res, wall


@pytest.fixture(scope="module")
def wide_gap_run():
    A = wide_gap_diag()
    pc, pb, _ = perturbed_diag_preconditioners(A, scale=1e4, seed=0)
    cfg = SvdConfig(k=1, tol=1e-14, precond_C=pc, precond_B=pb, instrument=AUDIT)
    res, wall = _timed_solve(A, cfg, 1e6)
    return A, res, wall


def oracle_shapes():
    rng = np.random.default_rng(2024)
    return [tuple(int(x) for x in rng.integers(5, 61, 2)) for _ in range(40)]


@pytest.fixture(scope="module")
def oracle_runs():
    out = []
    t0 = time.perf_counter()
    audit0 = AUDIT.seconds
    for m, n in oracle_shapes():
        for s in range(5):
            A = random_sparse(m, n, 0.2, seed=1000 * m + n * 7 + s)
            U, S, V = jacobi_svd(A.to_dense())
            AUDIT.start(max(S[-1], 1e-300))
            for which in ("smallest", "largest"):
                res = phsvds_solve(A, SvdConfig(k=3, which=which, tol=1e-10, instrument=AUDIT))
                out.append((A, U, S, V, which, res))
    wall = time.perf_counter() - t0 - (AUDIT.seconds - audit0)
    return out, wall


# ---------------------------------------------------------------- criteria

def test_criterion_01_clustered_smallest(clustered_run, acceptance):
    A, res, wall = clustered_run
    d = np.sort(A.diagonal())
    sig = np.sort(res.sigmas)
    rB = max(b.r_B_norm for b in res.bundles)
    cluster = (d[:10] >= 1e-9) & (d[:10] <= 5e-8)
    err = np.abs(sig - d[:10])
    allowed = np.maximum(1e-15, 1e-8 * d[:10])
    ok = (len(sig) == 10 and res.converged and rB <= 2e-15
          and bool(np.all(err[cluster] <= allowed[cluster])) and wall <= 120)
    acceptance(1, ok, f"max r_B {rB:.2e}, cluster rel err "
               f"{np.max(err[cluster] / d[:10][cluster]):.2e}, {res.matvecs} MV, {wall:.1f} s")
    assert ok


def test_criterion_02_two_stage_pattern(wide_gap_run, acceptance):
    A, res, wall = wide_gap_run
    norm = 1e6
    stage1 = [e.residual_norm for e in res.history.entries if e.stage == "C"]
    floor = min(stage1) if stage1 else 0.0
    b = res.bundles[0]
    ok = (floor > 1e-11 * norm and b.user <= 1e-14 * norm
          and abs(res.sigmas[0] - 1.0) <= 1e-9 and wall <= 180)
    acceptance(2, ok, f"stage-1 floor {floor / norm:.2e}*||A||, final "
               f"{b.user / norm:.2e}*||A||, sigma {float(res.sigmas[0])!r}, {wall:.1f} s")
    assert ok


def _oracle_gaps(S, m, n):
    """Distances to the nearest other eigenvalue of ``B`` restricted to ``>= 0``,
    counting the ``|m - n|`` extra zeros of a rectangular matrix."""
    vals = np.concatenate([S, np.zeros(abs(m - n))])
    gaps = []
    for j in range(S.size):
        others = np.delete(vals, j)
        gaps.append(np.min(np.abs(others - S[j])) if others.size else np.inf)
    return np.array(gaps)


def test_criterion_03_oracle_equivalence(oracle_runs, acceptance):
    runs, wall = oracle_runs
    worst_val = 0.0
    worst_sin = 0.0
    checked = 0
    for A, U, S, V, which, res in runs:
        m, n = A.shape
        norm = S[-1]
        want = S[:3] if which == "smallest" else S[::-1][:3]
        got = res.sigmas
        worst_val = max(worst_val, np.max(np.abs(np.sort(got) - np.sort(want))) / norm)
        gaps = _oracle_gaps(S, m, n)
        for t in res.triplets:
            j = int(np.argmin(np.abs(S - t.sigma)))
            if gaps[j] <= 1e-6 * norm:
                continue
            cv = abs(V[:, j] @ t.v) / np.linalg.norm(t.v)
            cu = abs(U[:, j] @ t.u) / np.linalg.norm(t.u)
            sin = max(math.sqrt(max(0.0, 1 - cv * cv)), math.sqrt(max(0.0, 1 - cu * cu)))
            worst_sin = max(worst_sin, sin)
            checked += 1
    ok = len(runs) == 400 and worst_val <= 1e-10 and worst_sin <= 1e-6 and wall <= 120
    acceptance(3, ok, f"{len(runs)} solves, value err {worst_val:.1e}*||A||, "
               f"max sin {worst_sin:.1e} over {checked} vectors, {wall:.1f} s")
    assert ok


def _random_spectrum(rng):
    n = int(rng.integers(3, 40))
    kind = rng.integers(3)
    if kind == 0:
        s = rng.random(n)
    elif kind == 1:
        s = 10.0 ** rng.uniform(-6, 0, n)
    else:
        s = np.concatenate([[rng.uniform(1e-4, 1e-1)], rng.uniform(0.2, 1.0, n - 1)])
    return np.sort(s)


def test_criterion_04_theory_sweep(acceptance):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    got = 0
    tau_fail = gap_fail = 0
    rho_dev = scale_dev = decimal_dev = 0.0

    def outputs(x):
        gB, gC, _ = gap_ratios_largest(x)
        return np.array([gB, gC, gamma_smallest(x), rate_bound_augmented(x).rho,
                         rate_bound_normal(x).q, speedup_tau(x)])

    while got < 10_000:
        s = _random_spectrum(rng)
        if np.any(np.diff(s) <= 0) or s[0] <= 0:
            continue
        if not gamma_smallest(s) < 0.25:
            continue
        got += 1
        ab = rate_bound_augmented(s)
        gB, gC, _ = gap_ratios_largest(s)
        tau_fail += not speedup_tau(s) > 1.0
        gap_fail += not math.sqrt(gC) > 2.0 * math.sqrt(gB)
        rho_dev = max(rho_dev, abs(ab.rho - ab.rho_interval))
        ref = outputs(s)
        # exact scalings test the formulas; a decimal factor also rounds the inputs
        k = int(rng.integers(-60, 61))
        scale_dev = max(scale_dev, float(np.max(np.abs(outputs(s * 2.0 ** k) - ref)
                                                / np.abs(ref))))
        c = 10.0 ** rng.uniform(-5, 5)
        decimal_dev = max(decimal_dev, float(np.max(np.abs(outputs(c * s) - ref)
                                                    / np.abs(ref))))
    wall = time.perf_counter() - t0
    ok = (tau_fail == 0 and gap_fail == 0 and rho_dev <= 1e-14 and scale_dev <= 1e-13
          and wall <= 10)
    acceptance(4, ok, f"{got} spectra, tau<=1: {tau_fail}, gap violations: {gap_fail}, "
               f"rho forms {rho_dev:.1e}, scale {scale_dev:.1e} "
               f"(decimal factors {decimal_dev:.1e}), {wall:.1f} s")
    assert ok


def test_criterion_05_krylov_ordering(acceptance):
    t0 = time.perf_counter()
    n, norm, tol = 300, 10.0, 1e-8
    A = log_spaced(n, kappa=1e3, norm=norm, seed=0)
    v1 = np.ones(n) / math.sqrt(n)
    rc = lanczos_unrestarted(normal_operator(A), v1, n, "smallest")
    kc = next((i + 1 for i, (th, r) in enumerate(zip(rc.values, rc.residuals))
               if r / math.sqrt(max(th, 1e-300)) <= tol * norm), None)
    rb = lanczos_unrestarted(augmented_operator(A), np.concatenate([v1, np.zeros(n)]), 2 * n,
                             "smallest_above", 0.0, math.sqrt(EPS) * norm)
    kb = next((i + 1 for i, r in enumerate(rb.residuals) if math.sqrt(2) * r <= tol * norm), None)
    kl = lbd_unrestarted(A, v1, n, "smallest", keep_states=False).steps_to(tol, norm)
    wall = time.perf_counter() - t0
    ok = (None not in (kc, kb, kl) and kl <= 1.1 * kc and kb >= 1.5 * kc and wall <= 30)
    acceptance(5, ok, f"iterations C {kc}, B {kb}, LBD {kl}, {wall:.1f} s")
    assert ok


def test_criterion_06_residual_identities(clustered_run, wide_gap_run, oracle_runs, acceptance):
    ok = AUDIT.count > 0 and AUDIT.worst_C <= 1e-13 and AUDIT.worst_B <= 1e-13
    acceptance(6, ok, f"{AUDIT.count} iterations, r_C identity {AUDIT.worst_C:.1e}, "
               f"r_B identity {AUDIT.worst_B:.1e}")
    assert ok


def _qr_append_deviation(seed, steps=8):
    rng = np.random.default_rng(seed)
    n = 60
    Q0 = random_orthogonal(n, rng)
    lam = rng.standard_normal(n)
    M = (Q0 * lam) @ Q0.T

    def op(X):
        return M @ X

    V, _ = np.linalg.qr(rng.standard_normal((n, 3)))
    W = op(V)
    state = SubspaceState(V, W, V.T @ W, np.zeros((n, 0)), target_shift=float(rng.normal()),
                          capacity=3 + steps)
    refresh_qr(state)
    worst = 0.0
    for _ in range(steps):
        x = rng.standard_normal(n)
        for _ in range(2):
            x -= state.V @ (state.V.T @ x)
        _append(state, op, [x / np.linalg.norm(x)], True, rng)
        Mt = state.W - state.target_shift * state.V
        scale = np.linalg.norm(Mt)
        _, Rf = np.linalg.qr(Mt)
        worst = max(worst, np.linalg.norm(state.Q @ state.R - Mt) / scale,
                    np.max(np.abs(np.abs(state.R) - np.abs(Rf))) / scale,
                    np.max(np.abs(state.Q.T @ state.Q - np.eye(state.size))))
        _, _, sing = refined_extract(state)
        ref = np.linalg.svd(Mt, compute_uv=False)[::-1]
        worst = max(worst, np.max(np.abs(sing - ref)) / scale)
    return worst


def test_criterion_07_refined_extraction(clustered_run, wide_gap_run, acceptance):
    qr_dev = max(_qr_append_deviation(seed) for seed in range(20))
    ok = (AUDIT.refined_count > 0 and AUDIT.refined_violation <= 0.0
          and AUDIT.monotone_violation <= 0.0 and qr_dev <= 1e-12)
    acceptance(7, ok, f"{AUDIT.refined_count} refined iterations, refined-Ritz excess "
               f"{max(AUDIT.refined_violation, 0.0):.1e}, monotonicity excess "
               f"{max(AUDIT.monotone_violation, 0.0):.1e}, QR update dev {qr_dev:.1e}")
    assert ok


SHIFT_INVERT_SHAPES = [(400, 300), (350, 200), (300, 250), (250, 120), (200, 380)]


def test_criterion_08_shift_invert(acceptance):
    t0 = time.perf_counter()
    worst_err = worst_res = 0.0
    worst_ratio = 0.0
    for i, (m, n) in enumerate(SHIFT_INVERT_SHAPES):
        A = random_sparse(m, n, 0.2, seed=i)
        U, S, V = jacobi_svd(A.to_dense())
        norm = S[-1]
        res = phsvds_solve(A, SvdConfig(k=10, tol=1e-10, shift_invert="qr_of_A"))
        worst_err = max(worst_err, np.max(np.abs(np.sort(res.sigmas) - S[:10])) / norm)
        worst_res = max(worst_res, max(b.user for b in res.bundles) / norm)
        op = shift_invert_operator(A)
        ref = lanczos_unrestarted(op, np.ones(op.shape[0]), op.shape[0], "largest", nev=10,
                                  tol=1e-10, norm_scale=1.0 / S[0] ** 2)
        worst_ratio = max(worst_ratio, res.matvecs / len(ref.residuals))
    wall = time.perf_counter() - t0
    ok = worst_err <= 1e-10 and worst_res <= 1e-10 and worst_ratio <= 3.0 and wall <= 60
    acceptance(8, ok, f"value error {worst_err:.1e}*||A||, residual {worst_res:.1e}*||A||, "
               f"MV ratio {worst_ratio:.2f}, "
               f"{wall:.1f} s")
    assert ok


def _switch_problem():
    n = 300
    s = np.logspace(-2, 1, n)
    A = SparseMatrix.diag(s)
    rng = np.random.default_rng(5)
    Q = random_orthogonal(n, rng)
    # an inverse factor with condition 1e6: squaring it for C wrecks the spectrum
    Mi = (Q / np.logspace(0, 6, n)) @ Q.T
    bad_C = precond_for_C_from_M(lambda x: Mi @ x, lambda x: Mi.T @ x, n)
    good = 1.0 / (s * (1 + 0.05 * rng.standard_normal(n)))
    good_C = precond_for_C_from_M(lambda x: good * x, lambda x: good * x, n)
    good_B = precond_for_B_from_M(lambda x: good * x, lambda x: good * x, n)
    return A, s, bad_C, good_C, good_B


def test_criterion_09_dynamic_switcher(acceptance):
    t0 = time.perf_counter()
    A, s, bad_C, good_C, good_B = _switch_problem()
    cfg = SvdConfig(k=10, tol=1e-14, max_matvecs=50_000)
    adv = dynamic_switch_solve(A, cfg, bad_C, good_B)
    adv_switches = adv.history.switches[-1]["switches"]
    adv_ok = (adv.decision == "augmented only" and adv.converged and adv_switches <= 6
              and np.max(np.abs(adv.sigmas - s[:10])) <= 1e-12)
    strong = dynamic_switch_solve(A, cfg, good_C, good_B)
    static = phsvds_solve(A, cfg, precond_C=good_C, precond_B=good_B)
    nsw = strong.history.switches[-1]["switches"]
    overhead = strong.matvecs - static.matvecs
    strong_ok = (strong.decision == "two-stage" and strong.converged and static.converged
                 and overhead <= 2 * cfg.init_iter * nsw)
    wall = time.perf_counter() - t0
    ok = adv_ok and strong_ok and wall <= 120
    acceptance(9, ok, f"adversarial: {adv.decision} after {adv_switches} switches, "
               f"{adv.matvecs} MV; strong: {strong.decision}, overhead {overhead} MV "
               f"<= {2 * cfg.init_iter * nsw}, {wall:.1f} s")
    assert ok


def test_criterion_10_cli_contract(tmp_path, monkeypatch, capsys, acceptance):
    monkeypatch.delenv("PHSVDS_SEED", raising=False)
    mtx = tmp_path / "rs.mtx"
    assert cli.main(["generate", "random-sparse", "--seed", "3", "--output", str(mtx)]) == 0
    oracle = np.linalg.svd(random_sparse(120, 80, density=0.1, seed=3).to_dense(),
                           compute_uv=False)

    counted = [0]
    real = spmv

    def counting(A, x):
        x = np.asarray(x)
        counted[0] += 1 if x.ndim == 1 else x.shape[1]
        return real(A, x)

    for mod in (operators_mod, solver_mod, baselines_mod):
        monkeypatch.setattr(mod, "spmv", counting)
    out = tmp_path / "run.json"
    code = cli.main(["svds", "--matrix", str(mtx), "--k", "3", "--output", str(out)])
    text = out.read_text()
    report = cli.RunReport.from_json(text)
    round_trip = report.to_json() == text and cli.RunReport.from_json(report.to_json()) == report
    counted_run = counted[0]
    audit_ok = report.matvecs == counted_run
    got = [t["sigma"] for t in report.triplets]
    values_ok = np.allclose(got, oracle[::-1][:3], rtol=0, atol=1e-10 * oracle[0])

    code_partial = cli.main(["svds", "--matrix", str(mtx), "--k", "3", "--max-matvecs", "10",
                             "--output", str(tmp_path / "partial.json")])
    partial = json.loads((tmp_path / "partial.json").read_text())
    code_usage = cli.main(["svds", "--matrix", str(tmp_path / "missing.mtx")])
    capsys.readouterr()
    ok = (code == 0 and round_trip and audit_ok and values_ok and code_partial == 2
          and partial["converged"] is False and code_usage == 1)
    acceptance(10, ok, f"exit {code}/{code_partial}/{code_usage}, round trip {round_trip}, "
               f"MV reported {report.matvecs} counted {counted_run}")
    assert ok
