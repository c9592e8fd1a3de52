"""Command-line harness: ``phsvds svds|analyze|compare|generate``.

Exit codes: 0 on full convergence, 2 on partial results, 1 on errors
(including usage errors).  ``PHSVDS_SEED`` overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import summarize_spectrum
from .baselines import lanczos_unrestarted, lbd_unrestarted
from .dense import EPS
from .eigensolver import EigConfig, gd_plus_k_solve
from .errors import ContractError, MatrixMarketError, NotConvergedError
from .generators import GENERATORS
from .history import ConvergenceHistory
from .operators import (augmented_operator, ilu0_preconditioners, jacobi_preconditioners,
                        normal_operator, oriented)
from .solver import SvdConfig, SvdResult, estimate_norm, phsvds_solve
from .sparse import read_matrix_market, write_matrix_market

SCHEMA_VERSION = 1
ANALYZE_DENSE_LIMIT = 2000  # dense SVD in `analyze` up to this dimension

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _nan_to_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


@dataclass
class RunReport:
    """Machine-readable record of one ``svds`` run."""

    config: dict
    triplets: list  # {sigma, r_u, r_v, r_C, r_B, status}
    matvecs: int
    wall_seconds: float
    converged: bool
    stages: list
    decision: str | None
    switches: list
    history: dict
    seed: int
    A_norm_est: float
    schema_version: int = SCHEMA_VERSION
    vectors: dict | None = field(default=None)

    @classmethod
    def from_result(cls, res: SvdResult, config: dict, wall, seed, with_vectors=False):
        trip = []
        for t, b in zip(res.triplets, res.bundles):
            trip.append({"sigma": float(t.sigma), "r_u": b.r_u_norm, "r_v": b.r_v_norm,
                         "r_C": _nan_to_none(b.r_C_norm), "r_B": b.r_B_norm,
                         "status": t.status})
        vecs = None
        if with_vectors:
            vecs = {"u": [t.u.tolist() for t in res.triplets],
                    "v": [t.v.tolist() for t in res.triplets]}
        return cls(config, trip, int(res.matvecs), float(wall), bool(res.converged),
                   list(res.stages), res.decision, list(res.history.switches),
                   res.history.to_dict(), int(seed), float(res.A_norm_est), vectors=vecs)

    @property
    def fully_converged(self):
        return self.converged and all(t["status"] != "not_converged" for t in self.triplets)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, allow_nan=False)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(**d)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "sigma", "r_u", "r_v", "r_C", "r_B", "status"])
        for i, t in enumerate(self.triplets):
            w.writerow([i, repr(t["sigma"]), repr(t["r_u"]), repr(t["r_v"]),
                        "" if t["r_C"] is None else repr(t["r_C"]), repr(t["r_B"]),
                        t["status"]])
        return buf.getvalue()

    def history_object(self):
        return ConvergenceHistory.from_dict(self.history)


def _seed(args):
    env = os.environ.get("PHSVDS_SEED")
    if env is not None and env.strip() != "":
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"PHSVDS_SEED must be an integer, got {env!r}") from exc
    return args.seed


def _load(path):
    if path is None:
        raise UsageError("--matrix is required")
    if not os.path.exists(path):
        raise UsageError(f"matrix file not found: {path}")
    return read_matrix_market(path)


def _emit(text, out_path):
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


# ---------------------------------------------------------------- svds

def build_svds_config(args, A, seed):
    kw = dict(k=args.k, which=args.which, tol=args.tol,
              stage2_method="gd_plus_k" if args.stage2 == "gdk" else "jdqmr",
              block_size=args.block, max_basis=args.max_basis, min_restart=args.min_restart,
              seed=seed, random_guess=args.random_guess, dynamic_switching=args.dynamic)
    if args.max_matvecs is not None:
        kw["max_matvecs"] = args.max_matvecs
    precond = args.precond
    if args.dynamic and precond is None:
        precond = "jacobi"
    At, _ = oriented(A)
    if precond in ("jacobi", "ilu0"):
        if precond == "ilu0" and A.nrows != A.ncols:
            raise UsageError("--precond ilu0 needs a square matrix")
        pc, pb = jacobi_preconditioners(At) if precond == "jacobi" else ilu0_preconditioners(At)
        kw["precond_C"], kw["precond_B"] = pc, pb
    elif precond == "shift-invert-qr":
        kw["shift_invert"] = "qr_of_A"
    elif precond == "shift-invert-lu":
        kw["shift_invert"] = "lu_of_B"
    return SvdConfig(**kw), precond or "none"


def cmd_svds(args):
    A = _load(args.matrix)
    seed = _seed(args)
    cfg, precond = build_svds_config(args, A, seed)
    t0 = time.perf_counter()
    res = phsvds_solve(A, cfg)
    wall = time.perf_counter() - t0
    config = {"matrix": args.matrix, "shape": list(A.shape), "k": cfg.k, "which": cfg.which,
              "tol": cfg.tol, "stage2": args.stage2, "precond": precond, "block": cfg.block_size,
              "max_basis": cfg.max_basis, "min_restart": cfg.min_restart,
              "dynamic": cfg.dynamic_switching, "random_guess": cfg.random_guess,
              "max_matvecs": cfg.max_matvecs}
    report = RunReport.from_result(res, config, wall, seed, with_vectors=args.vectors)
    _emit(report.to_json() if args.out == "json" else report.to_csv(), args.output)
    return EXIT_OK if report.fully_converged else EXIT_PARTIAL


# ---------------------------------------------------------------- analyze

def _spectrum_of(A, kmax):
    """Full singular spectrum when small, otherwise the extreme values that
    the gap and rate formulas actually use."""
    At, _ = oriented(A)
    if max(At.shape) <= ANALYZE_DENSE_LIMIT:
        s = np.linalg.svd(At.to_dense(), compute_uv=False)[::-1]
        return np.maximum(s, 0.0), "dense", float(s[-1])
    n = At.ncols
    lo = phsvds_solve(At, SvdConfig(k=min(kmax + 1, n), tol=1e-10)).sigmas
    hi = phsvds_solve(At, SvdConfig(k=min(2, n), which="largest", tol=1e-10)).sigmas
    s = np.unique(np.concatenate([lo, hi]))
    return s, "iterative", float(estimate_norm(At, steps=50))


def cmd_analyze(args):
    ks = [int(k) for k in str(args.k).split(",")] if args.k else [1, 5, 10]
    if args.sigma_list:
        s = np.sort(np.array([float(x) for x in args.sigma_list.split(",")]))
        norm, source = float(s[-1]), "sigma-list"
    else:
        A = _load(args.matrix)
        s, source, norm = _spectrum_of(A, max(ks))
    summary = summarize_spectrum(s, ks=tuple(k for k in ks if k <= s.size))
    d = summary.to_dict()
    d["norm"] = norm
    d["kappa"] = norm / float(s[0]) if s[0] > 0 else None
    d["source"] = source
    d["schema_version"] = SCHEMA_VERSION
    _emit(json.dumps(d, indent=1), args.output)
    return EXIT_OK


# ---------------------------------------------------------------- compare

def compare_traces(A, steps, target="smallest", restarted=False, tol=1e-12, seed=0):
    """Residual traces of several methods from the same start vector.

    Residuals are in the triplet metric ``sqrt(r_u^2 + r_v^2)``: ``r_C / s``
    for methods on ``C``, ``sqrt(2) r_B`` for methods on ``B`` (unit vectors
    with balanced halves) and the native value for LBD.  Methods on ``B``
    get ``2 * steps`` iterations: from ``[v; 0]`` each step adds one
    half-vector, so two of them match one step on ``C``.  Returns rows
    ``(method, step, value, residual)``.
    """
    At, _ = oriented(A)
    n = At.ncols
    m = At.nrows
    v1 = np.ones(n) / math.sqrt(n)
    seedB = np.concatenate([v1, np.zeros(m)])
    norm = estimate_norm(At, steps=min(30, n))
    rows = []
    if not restarted:
        C = normal_operator(At)
        rc = lanczos_unrestarted(C, v1, steps, target)
        for i, (th, r) in enumerate(zip(rc.values, rc.residuals)):
            s = math.sqrt(max(th, 0.0))
            rows.append(("lanczos-C", i + 1, s, r / s if s > 0 else r))
        B = augmented_operator(At)
        ext = "smallest_above" if target == "smallest" else "largest"
        rb = lanczos_unrestarted(B, seedB, 2 * steps, ext, 0.0, math.sqrt(EPS) * norm)
        for i, (th, r) in enumerate(zip(rb.values, rb.residuals)):
            rows.append(("lanczos-B", i + 1, abs(th), math.sqrt(2.0) * r))
        rl = lbd_unrestarted(At, v1, steps, target, keep_states=False)
        for i, (s, r) in enumerate(zip(rl.sigmas, rl.residuals)):
            rows.append(("lbd", i + 1, s, r))
    for name, op, x0, which, nsteps in (
            ("gdk-C", normal_operator(At), v1,
             "smallest_algebraic" if target == "smallest" else "largest_algebraic", steps),
            ("gdk-B", augmented_operator(At), seedB,
             "closest_geq" if target == "smallest" else "largest_algebraic", 2 * steps)):
        if restarted:
            mb, mr, kp = min(35, op.shape[0]), min(21, op.shape[0] - 2), 1
        else:
            mb, mr, kp = min(nsteps + 2, op.shape[0]), 1, 0
        mr = max(1, min(mr, mb - kp - 1))
        ecfg = EigConfig(max_basis=mb, min_restart=mr, k_prev=kp, which=which,
                         shifts=(math.sqrt(EPS) * norm,) if which == "closest_geq" else (),
                         max_outer=nsteps, tol=tol, seed=seed, stall_iters=10**9)
        hist = ConvergenceHistory(seed=seed)
        if name == "gdk-C":
            def metric(th, rn):
                s = math.sqrt(max(th, 0.0))
                return rn / s if s > 0 else rn
        else:
            def metric(th, rn):
                return math.sqrt(2.0) * rn
        trace = []

        def cb(info, trace=trace, name=name, metric=metric):
            th = info["theta"]
            val = math.sqrt(max(th, 0.0)) if name == "gdk-C" else abs(th)
            trace.append((val, metric(th, info["rnorm"])))

        try:
            gd_plus_k_solve(op, None, ecfg, [x0], 1, metric=metric, history=hist, callback=cb,
                            convergence_test=lambda th, x, rn, est, idx:
                            metric(th, rn) <= tol * norm)
        except NotConvergedError:
            pass
        for i, (val, r) in enumerate(trace[:nsteps]):
            rows.append((name, i + 1, val, r))
    return rows


def cmd_compare(args):
    A = _load(args.matrix)
    restarted = str(args.restarted).lower() in ("true", "1", "yes")
    rows = compare_traces(A, args.steps, args.target, restarted, args.tol, _seed(args))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "step", "value", "residual"])
    for r in rows:
        w.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3]))])
    _emit(buf.getvalue(), args.output)
    return EXIT_OK


# ---------------------------------------------------------------- generate

def cmd_generate(args):
    A = GENERATORS[args.name](_seed(args))
    text = write_matrix_market(A, comment=f"phsvds generate {args.name}")
    _emit(text, args.output)
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser():
    p = _Parser(prog="phsvds", description="Hybrid two-stage sparse SVD solver")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("svds", help="compute extreme singular triplets")
    s.add_argument("--matrix", required=True)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--which", choices=["smallest", "largest"], default="smallest")
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--stage2", choices=["gdk", "jdqmr"], default="jdqmr")
    s.add_argument("--precond", choices=["none", "jacobi", "ilu0", "shift-invert-qr",
                                         "shift-invert-lu"], default=None)
    s.add_argument("--block", type=int, default=1)
    s.add_argument("--max-basis", type=int, default=35)
    s.add_argument("--min-restart", type=int, default=21)
    s.add_argument("--dynamic", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", choices=["json", "csv"], default="json")
    s.add_argument("--random-guess", action="store_true")
    s.add_argument("--max-matvecs", type=int, default=None)
    s.add_argument("--vectors", action="store_true", help="include u and v in the JSON report")
    s.add_argument("--output", default=None, help="write the report here instead of stdout")
    s.set_defaults(func=cmd_svds)

    a = sub.add_parser("analyze", help="spectrum gaps and convergence-rate bounds")
    a.add_argument("--matrix")
    a.add_argument("--sigma-list")
    a.add_argument("--k", default=None, help="comma-separated k values for gamma_m(k)")
    a.add_argument("--output", default=None)
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("compare", help="per-iteration residual traces of reference methods")
    c.add_argument("--matrix", required=True)
    c.add_argument("--target", choices=["smallest", "largest"], default="smallest")
    c.add_argument("--steps", type=int, default=100)
    c.add_argument("--restarted", default="false")
    c.add_argument("--tol", type=float, default=1e-12)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--output", default=None)
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("generate", help="write a synthetic test matrix")
    g.add_argument("name", choices=sorted(GENERATORS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--output", default=None)
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.command == "analyze" and not (args.matrix or args.sigma_list):
            raise UsageError("analyze needs --matrix or --sigma-list")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ContractError, MatrixMarketError, ArithmeticError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
