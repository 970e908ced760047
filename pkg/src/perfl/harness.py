"""Experiment orchestration: config parsing, problem assembly, reference
optima, trace CSVs, and lower-bound certification runs.

Configs are line-oriented key=value text (# starts a comment). Exactly one
problem source must be given: a LIBSVM path, a quadratic instance file, a
synthetic quadratic or logistic spec, or a lower-bound spec. Method knobs
use dotted keys, e.g. "al2sgd_plus.rho=0.02".
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import data as datamod
from . import lowerbound as lbmod
from .losses import QuadraticLoss, make_batch
from .model import Problem, StackedPoint
from .solvers import METHODS, SolverResult, SolverRun, solve

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "CertifyOutcome",
    "parse_config",
    "build_problem",
    "reference_optimum",
    "cmd_run",
    "cmd_certify_lowerbound",
    "cmd_split",
    "cmd_gen_quadratic",
    "write_trace_csv",
    "TRACE_HEADER",
]

TRACE_HEADER = "k,comm_rounds,grad_calls,prox_calls,summand_grad_calls,rel_subopt,dist_sq"

_METHOD_PARAM_TYPES = {"p": float, "rho": float, "t_fixed": int, "schedule": str}

_SOURCE_KEYS = ("libsvm", "quadratic", "quadratic_n", "logistic_rows", "lowerbound_n")


@dataclass
class ExperimentConfig:
    source: str
    libsvm: Optional[str] = None
    split_mode: str = "heterogeneous"
    normalize: bool = True
    clients: Optional[int] = None
    quadratic_path: Optional[str] = None
    quadratic_n: Optional[int] = None
    quadratic_d: Optional[int] = None
    quadratic_mu: float = 1e-4
    quadratic_L: float = 1.0
    quadratic_seed: int = 0
    logistic_rows: Optional[int] = None
    logistic_dim: Optional[int] = None
    logistic_seed: int = 0
    lowerbound: Optional[dict] = None
    lam_rule: str = "1"
    mu: float = 1e-4
    methods: Tuple[str, ...] = ()
    method_params: Dict[str, dict] = field(default_factory=dict)
    max_comm: int = 1000
    target_rel_subopt: float = 0.0
    target_rel_dist: Optional[float] = None
    seed: int = 0
    out: Optional[str] = None
    f_star_override: Optional[float] = None


def _as_bool(v: str) -> bool:
    return v.strip().lower() not in ("0", "false", "no", "off")


def parse_config(text: str) -> ExperimentConfig:
    kv: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        key, val = key.strip(), val.strip()
        if key in kv:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        kv[key] = val

    cfg = ExperimentConfig(source="")
    method_params: Dict[str, dict] = {}
    lb: Dict[str, float] = {}

    setters = {
        "libsvm": ("libsvm", str),
        "split": ("split_mode", str),
        "normalize": ("normalize", _as_bool),
        "clients": ("clients", int),
        "quadratic": ("quadratic_path", str),
        "quadratic_n": ("quadratic_n", int),
        "quadratic_d": ("quadratic_d", int),
        "quadratic_mu": ("quadratic_mu", float),
        "quadratic_L": ("quadratic_L", float),
        "quadratic_seed": ("quadratic_seed", int),
        "logistic_rows": ("logistic_rows", int),
        "logistic_dim": ("logistic_dim", int),
        "logistic_seed": ("logistic_seed", int),
        "lambda": ("lam_rule", str),
        "mu": ("mu", float),
        "max_comm": ("max_comm", int),
        "target_rel_subopt": ("target_rel_subopt", float),
        "target_rel_dist": ("target_rel_dist", float),
        "seed": ("seed", int),
        "out": ("out", str),
        "f_star": ("f_star_override", float),
    }

    for key, val in kv.items():
        if key in setters:
            attr, conv = setters[key]
            try:
                setattr(cfg, attr, conv(val))
            except ValueError:
                raise ValueError(f"config key {key}: cannot parse {val!r}") from None
        elif key == "methods":
            cfg.methods = tuple(s.strip() for s in val.split(",") if s.strip())
        elif key.startswith("lowerbound_"):
            sub = key[len("lowerbound_"):]
            if sub not in ("n", "T", "mu", "L", "lambda"):
                raise ValueError(f"unknown config key {key!r}")
            lb[sub] = int(val) if sub in ("n", "T") else float(val)
        elif "." in key:
            meth, param = key.split(".", 1)
            if meth not in METHODS:
                raise ValueError(f"config key {key!r}: unknown method {meth!r}")
            if param not in _METHOD_PARAM_TYPES:
                raise ValueError(f"config key {key!r}: unknown parameter {param!r}")
            method_params.setdefault(meth, {})[param] = _METHOD_PARAM_TYPES[param](val)
        else:
            raise ValueError(f"unknown config key {key!r}")

    cfg.method_params = method_params
    if lb:
        missing = {"n", "T", "mu", "L", "lambda"} - set(lb)
        if missing:
            raise ValueError(f"lower-bound spec is missing {sorted(missing)}")
        cfg.lowerbound = lb

    for m in cfg.methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r} in methods list")

    present = [k for k in _SOURCE_KEYS if kv.get(k)]
    if len(present) != 1:
        raise ValueError(
            f"exactly one problem source required, found {present or 'none'}"
        )
    cfg.source = {"quadratic": "quadratic_file", "quadratic_n": "quadratic_synth",
                  "logistic_rows": "logistic_synth", "lowerbound_n": "lowerbound",
                  "libsvm": "libsvm"}[present[0]]
    return cfg


def _resolve_lambda(rule: str, m: int) -> float:
    rule = rule.strip()
    if rule == "1/m":
        return 1.0 / m
    try:
        return float(rule)
    except ValueError:
        raise ValueError(f"lambda must be a number or '1/m', got {rule!r}") from None


def _synth_quadratic_losses(n: int, d: int, mu: float, L: float, seed: int):
    """Per client: rotation of a linspace(mu, L) spectrum plus a Gaussian
    linear term, so the merged curvature constants are exact by design."""
    if not (L >= mu > 0):
        raise ValueError("need L >= mu > 0")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    eigs = np.linspace(mu, L, d)
    losses = []
    for _ in range(n):
        Q, _r = np.linalg.qr(rng.normal(size=(d, d)))
        A = (Q * eigs) @ Q.T
        A = 0.5 * (A + A.T)
        losses.append(QuadraticLoss(A, rng.normal(size=d)))
    return losses


def build_problem(cfg: ExperimentConfig):
    """Returns (problem, meta); meta carries m, the resolved lambda, and the
    lower-bound instance when that source is used."""
    meta: dict = {"source": cfg.source}
    if cfg.source == "lowerbound":
        if cfg.lam_rule != "1":
            raise ValueError("use lowerbound_lambda for lower-bound instances")
        lb = cfg.lowerbound
        inst = lbmod.build_instance(int(lb["n"]), int(lb["T"]), lb["mu"], lb["L"],
                                    lb["lambda"])
        meta.update(m=1, lam=inst.lam, instance=inst)
        return inst.problem, meta

    if cfg.source == "libsvm":
        if cfg.clients is None:
            raise ValueError("clients= is required for LIBSVM problems")
        if not os.path.exists(cfg.libsvm):
            raise ValueError(f"LIBSVM file not found: {cfg.libsvm}")
        with open(cfg.libsvm, "r", encoding="utf-8") as fh:
            ds = datamod.parse_libsvm(fh)
        if cfg.normalize:
            ds = datamod.normalize(ds)
        sp = datamod.split(ds, cfg.clients, cfg.split_mode, cfg.seed)
        losses = datamod.client_losses(ds, sp, cfg.mu)
        lam = _resolve_lambda(cfg.lam_rule, sp.m)
        meta.update(m=sp.m, lam=lam, dropped=sp.dropped)
        return Problem.build(losses, lam), meta

    if cfg.source == "logistic_synth":
        if cfg.clients is None or cfg.logistic_dim is None:
            raise ValueError("logistic_rows, logistic_dim and clients are all required")
        ds = datamod.synthetic_logistic(cfg.logistic_rows, cfg.logistic_dim,
                                        cfg.logistic_seed)
        if cfg.normalize:
            ds = datamod.normalize(ds)
        sp = datamod.split(ds, cfg.clients, cfg.split_mode, cfg.logistic_seed)
        losses = datamod.client_losses(ds, sp, cfg.mu)
        lam = _resolve_lambda(cfg.lam_rule, sp.m)
        meta.update(m=sp.m, lam=lam, dropped=sp.dropped)
        return Problem.build(losses, lam), meta

    if cfg.source == "quadratic_file":
        if not os.path.exists(cfg.quadratic_path):
            raise ValueError(f"instance file not found: {cfg.quadratic_path}")
        with np.load(cfg.quadratic_path) as z:
            A, b = z["A"], z["b"]
        losses = [QuadraticLoss(A[i], b[i]) for i in range(A.shape[0])]
        lam = _resolve_lambda(cfg.lam_rule, 1)
        meta.update(m=1, lam=lam)
        return Problem.build(losses, lam), meta

    # quadratic_synth
    if cfg.quadratic_n is None or cfg.quadratic_d is None:
        raise ValueError("quadratic_n and quadratic_d are both required")
    losses = _synth_quadratic_losses(cfg.quadratic_n, cfg.quadratic_d,
                                     cfg.quadratic_mu, cfg.quadratic_L,
                                     cfg.quadratic_seed)
    lam = _resolve_lambda(cfg.lam_rule, 1)
    meta.update(m=1, lam=lam)
    return Problem.build(losses, lam), meta


# ---------------------------------------------------------------------------
# Reference optima.


def exact_quadratic_optimum(p: Problem) -> Tuple[StackedPoint, float]:
    """Direct stationarity solve for all-quadratic problems:
    (H_i + lam I)x_i - (lam/n) sum_j x_j = -b_i, one SPD system."""
    n, d = p.n, p.d
    H = np.zeros((n * d, n * d))
    rhs = np.zeros(n * d)
    lam_avg = p.lam / n * np.eye(d)
    for i, loss in enumerate(p.losses):
        sl = slice(i * d, (i + 1) * d)
        H[sl, sl] = loss._H + p.lam * np.eye(d)
        rhs[i * d:(i + 1) * d] = -loss.b
        for j in range(n):
            H[sl, j * d:(j + 1) * d] -= lam_avg
    xs = StackedPoint.from_flat(np.linalg.solve(H, rhs), n, d)
    batch = make_batch(p.losses)
    dev = xs.blocks - xs.blocks.mean(axis=0)
    f_star = float(batch.value(xs.blocks).mean()
                   + p.lam * (dev * dev).sum() / (2 * n))
    return xs, f_star


def _apgd1_reference(p: Problem, iters_cap: int, prox_tol: float = 1e-12) -> float:
    """High-accuracy reference objective by running the exact-prox accelerated
    loop until the objective plateaus (or the iteration cap)."""
    lam, mu = p.lam, p.constants.mu
    if lam <= 0 or mu <= 0:
        raise ValueError("reference run needs lambda > 0 and mu > 0")
    batch = make_batch(p.losses)
    q = (math.sqrt(lam) - math.sqrt(mu)) / (math.sqrt(lam) + math.sqrt(mu))
    n, d = p.n, p.d
    X = np.zeros((n, d))
    Y = X.copy()
    dev = X - X.mean(axis=0)
    f_best = float(batch.value(X).mean() + lam * (dev * dev).sum() / (2 * n))
    stall = 0
    for _ in range(iters_cap):
        ybar = Y.mean(axis=0)
        X_new = batch.prox(1.0 / lam, np.broadcast_to(ybar, (n, d)), tol=prox_tol)
        Y = X_new + q * (X_new - X)
        X = X_new
        dev = X - X.mean(axis=0)
        f = float(batch.value(X).mean() + lam * (dev * dev).sum() / (2 * n))
        if f < f_best - 1e-15 * max(1.0, abs(f_best)):
            f_best = f
            stall = 0
        else:
            stall += 1
            if stall >= 25:
                break
    return f_best


def reference_optimum(p: Problem, max_comm: int):
    """(f_star, x_star_or_None, how). Quadratics get the linear solve; other
    losses a plateau-stopped accelerated prox reference at tight tolerance."""
    if all(isinstance(l, QuadraticLoss) for l in p.losses):
        xs, f_star = exact_quadratic_optimum(p)
        return f_star, xs, "linear_solve"
    return _apgd1_reference(p, max(10 * max_comm, 200)), None, "apgd1_reference"


# ---------------------------------------------------------------------------
# Commands.


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trace_csv(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(TRACE_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r.k},{r.comm_rounds},{r.grad_calls},{r.prox_calls},"
                f"{r.summand_grad_calls},{_fmt(r.rel_subopt)},{_fmt(r.dist_sq)}\n"
            )


@dataclass
class ExperimentResult:
    f_star: float
    f_star_how: str
    lam: float
    results: Dict[str, SolverResult]
    csv_paths: Dict[str, str]
    summary_path: Optional[str]
    lines: List[str]


def cmd_run(cfg: ExperimentConfig) -> ExperimentResult:
    if not cfg.methods:
        raise ValueError("methods= must name at least one solver")
    problem, meta = build_problem(cfg)
    x0 = StackedPoint.zeros(problem.n, problem.d)

    if cfg.f_star_override is not None:
        f_star, xs, how = cfg.f_star_override, None, "config"
        if cfg.source in ("quadratic_file", "quadratic_synth", "lowerbound"):
            xs, _ = exact_quadratic_optimum(problem)
    else:
        f_star, xs, how = reference_optimum(problem, cfg.max_comm)

    results: Dict[str, SolverResult] = {}
    csv_paths: Dict[str, str] = {}
    lines = [f"f_star={_fmt(f_star)} ({how}) lambda={_fmt(meta['lam'])}"]
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
    for method in cfg.methods:
        run = SolverRun(
            method=method,
            x0=x0,
            max_comm=cfg.max_comm,
            target_rel_subopt=cfg.target_rel_subopt,
            seed=cfg.seed,
            method_params=dict(cfg.method_params.get(method, {})),
            f_star=f_star,
            x_star=xs,
            target_rel_dist=cfg.target_rel_dist,
        )
        res = solve(problem, run)
        results[method] = res
        last = res.rows[-1]
        lines.append(
            f"{method}: k={last.k} comm={last.comm_rounds} grad={last.grad_calls} "
            f"prox={last.prox_calls} summand={last.summand_grad_calls} "
            f"rel_subopt={_fmt(last.rel_subopt)}"
        )
        if cfg.out:
            path = os.path.join(cfg.out, f"{method}.csv")
            write_trace_csv(path, res.rows)
            csv_paths[method] = path

    summary_path = None
    if cfg.out:
        summary_path = os.path.join(cfg.out, "summary.csv")
        with open(summary_path, "w", encoding="utf-8", newline="") as fh:
            fh.write("method,k,comm_rounds,grad_calls,prox_calls,"
                     "summand_grad_calls,final_rel_subopt,f_star\n")
            for method in cfg.methods:
                last = results[method].rows[-1]
                fh.write(f"{method},{last.k},{last.comm_rounds},{last.grad_calls},"
                         f"{last.prox_calls},{last.summand_grad_calls},"
                         f"{_fmt(last.rel_subopt)},{_fmt(f_star)}\n")
    return ExperimentResult(f_star, how, meta["lam"], results, csv_paths,
                            summary_path, lines)


@dataclass
class CertifyOutcome:
    ok: bool
    reports: Dict[str, "lbmod.CertifyReport"]
    lines: List[str]
    csv_paths: Dict[str, str]


def cmd_certify_lowerbound(cfg: ExperimentConfig) -> CertifyOutcome:
    if cfg.source != "lowerbound":
        raise ValueError("certify needs a lowerbound_* spec")
    problem, meta = build_problem(cfg)
    inst = meta["instance"]
    xs, gamma_check = lbmod.exact_optimum(inst)
    f_star = None
    methods = cfg.methods or ("apgd1", "apgd2")
    x0 = StackedPoint.zeros(problem.n, problem.d)
    lines = [
        f"instance: n={inst.n} T={inst.T} mu={_fmt(inst.mu)} L={_fmt(inst.L)} "
        f"lambda={_fmt(inst.lam)} gamma={_fmt(inst.gamma)} "
        f"gamma_check={_fmt(gamma_check)} b={_fmt(inst.b)}"
    ]
    if inst.smoothness_exceeds_requested:
        lines.append(
            f"note: realized per-client smoothness {_fmt(problem.constants.L)} "
            f"exceeds the requested L={_fmt(inst.L)}; certified constants are used"
        )
    reports: Dict[str, lbmod.CertifyReport] = {}
    csv_paths: Dict[str, str] = {}
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
    for method in methods:
        if f_star is None:
            _, f_star = exact_quadratic_optimum(problem)
        run = SolverRun(
            method=method, x0=x0, max_comm=cfg.max_comm,
            seed=cfg.seed, method_params=dict(cfg.method_params.get(method, {})),
            f_star=f_star, x_star=xs, record_iterates=True,
        )
        res = solve(problem, run)
        report = lbmod.certify_bound(inst, res.iterates,
                                     [r.comm_rounds for r in res.rows])
        reports[method] = report
        lines.append(f"{method}: {report.summary()}")
        for idx, ck, dist, bound, support, passed in report.rows:
            lines.append(
                f"  k={idx} C={ck} dist_sq={_fmt(dist)} bound={_fmt(bound)} "
                f"ratio={_fmt(dist / bound if bound > 0 else float('inf'))} "
                f"support={support}<={ck + 1} {'PASS' if passed else 'FAIL'}"
            )
        if cfg.out:
            path = os.path.join(cfg.out, f"certify_{method}.csv")
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write("k,comm_rounds,dist_sq,bound,support,support_cap,pass\n")
                for idx, ck, dist, bound, support, passed in report.rows:
                    fh.write(f"{idx},{ck},{_fmt(dist)},{_fmt(bound)},{support},"
                             f"{ck + 1},{int(passed)}\n")
            csv_paths[method] = path
    ok = all(r.ok for r in reports.values())
    lines.append("certification " + ("PASSED" if ok else "FAILED"))
    return CertifyOutcome(ok, reports, lines, csv_paths)


def cmd_split(libsvm_path: str, n: int, mode: str, seed: int = 0):
    """Parse, split, and return (manifest_csv, info dict)."""
    if not os.path.exists(libsvm_path):
        raise ValueError(f"LIBSVM file not found: {libsvm_path}")
    with open(libsvm_path, "r", encoding="utf-8") as fh:
        ds = datamod.parse_libsvm(fh)
    sp = datamod.split(ds, n, mode, seed)
    info = {"rows": ds.size, "d": ds.d, "n": sp.n, "m": sp.m, "dropped": sp.dropped}
    return sp.manifest_csv(), info


def cmd_gen_quadratic(cfg: ExperimentConfig) -> Tuple[str, dict]:
    """Write a synthetic quadratic instance file ({A: (n,d,d), b: (n,d)})."""
    if cfg.source != "quadratic_synth":
        raise ValueError("gen-quadratic needs quadratic_n/quadratic_d/... keys")
    if not cfg.out:
        raise ValueError("out= must give the instance file path")
    losses = _synth_quadratic_losses(cfg.quadratic_n, cfg.quadratic_d,
                                     cfg.quadratic_mu, cfg.quadratic_L,
                                     cfg.quadratic_seed)
    A = np.stack([l.A for l in losses])
    b = np.stack([l.b for l in losses])
    parent = os.path.dirname(cfg.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    np.savez(cfg.out, A=A, b=b)
    return cfg.out, {"n": int(A.shape[0]), "d": int(A.shape[1])}
