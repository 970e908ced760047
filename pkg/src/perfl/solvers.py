"""Solver loops over a shared Problem, metering every oracle call and round.

All six methods speak the same protocol: start from run.x0, iterate until the
communication budget is spent or the relative suboptimality target is met,
and emit one TraceRow per communication event (plus the initial state). The
deterministic methods communicate once per iteration; the stochastic pair
communicates only on coin events, and rounds are charged on transitions of
the averaging coin, matching the expected p(1-p)-rounds-per-step model.

Iterate layout is a raw (n, d) array throughout; StackedPoint only appears
at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .losses import make_batch
from .model import OracleLedger, Problem, StackedPoint
from .subsolvers import FiniteSumHandle, Subsolver, agd_solve, katyusha_solve

__all__ = [
    "METHODS",
    "SolverRun",
    "TraceRow",
    "SolverResult",
    "pgd1",
    "pgd2",
    "apgd1",
    "apgd2",
    "iapgd",
    "al2sgd_plus",
    "l2sgd_plus",
    "vr_estimator",
    "solve",
]

METHODS = (
    "pgd1",
    "pgd2",
    "apgd1",
    "apgd2",
    "iapgd_agd",
    "iapgd_katyusha",
    "l2sgd_plus",
    "al2sgd_plus",
)

_ALLOWED_PARAMS = {
    "pgd1": frozenset(),
    "pgd2": frozenset(),
    "apgd1": frozenset(),
    "apgd2": frozenset(),
    "iapgd_agd": frozenset({"t_fixed"}),
    "iapgd_katyusha": frozenset({"t_fixed", "schedule"}),
    "l2sgd_plus": frozenset({"p", "rho"}),
    "al2sgd_plus": frozenset({"p", "rho"}),
}

_REL_FLOOR = 1e-16


@dataclass
class SolverRun:
    """One run request: method, start point, budgets, and method knobs.

    f_star/x_star are optional references; when present the trace carries
    relative suboptimality and squared distance, and target_rel_subopt
    becomes an active stopping rule.
    """

    method: str
    x0: StackedPoint
    max_comm: int
    target_rel_subopt: float = 0.0
    seed: int = 0
    method_params: dict = field(default_factory=dict)
    f_star: Optional[float] = None
    x_star: Optional[StackedPoint] = None
    target_rel_dist: Optional[float] = None
    record_iterates: bool = False
    max_iters: int = 10_000_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.max_comm < 0:
            raise ValueError("max_comm must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        extra = set(self.method_params) - _ALLOWED_PARAMS[self.method]
        if extra:
            raise ValueError(
                f"parameters {sorted(extra)} do not apply to {self.method}; "
                f"allowed: {sorted(_ALLOWED_PARAMS[self.method]) or 'none'}"
            )


@dataclass
class TraceRow:
    k: int
    comm_rounds: int
    grad_calls: int
    prox_calls: int
    summand_grad_calls: int
    rel_subopt: float
    dist_sq: float


@dataclass
class SolverResult:
    method: str
    rows: list
    x_final: StackedPoint
    ledger: OracleLedger
    f0: float
    iterates: Optional[list] = None


def _objective(batch, lam: float, X: np.ndarray) -> float:
    dev = X - X.mean(axis=0)
    return float(batch.value(X).mean() + lam * (dev * dev).sum() / (2 * X.shape[0]))


class _Trace:
    """Row collector; owns the stopping decision so loops stay uniform."""

    def __init__(self, problem: Problem, batch, run: SolverRun, ledger: OracleLedger):
        self.batch = batch
        self.lam = problem.lam
        self.run = run
        self.ledger = ledger
        self.rows: list = []
        self.iterates: Optional[list] = [] if run.record_iterates else None
        self.f0 = _objective(batch, self.lam, run.x0.blocks)
        if run.f_star is not None:
            self.denom = max(self.f0 - run.f_star, 1e-300)
        else:
            self.denom = None
        self.xs = run.x_star.blocks if run.x_star is not None else None
        if self.xs is not None:
            self.d0 = max(float(((run.x0.blocks - self.xs) ** 2).sum()), 1e-300)
        else:
            self.d0 = None

    def record(self, k: int, X: np.ndarray) -> bool:
        """Append a row for iterate X; True means stop (target or budget)."""
        if self.denom is not None:
            rel = max((_objective(self.batch, self.lam, X) - self.run.f_star) / self.denom,
                      _REL_FLOOR)
        else:
            rel = float("nan")
        if self.xs is not None:
            dsq = float(((X - self.xs) ** 2).sum())
        else:
            dsq = float("nan")
        c, g, pr, sg = self.ledger.snapshot()
        self.rows.append(TraceRow(k, c, g, pr, sg, rel, dsq))
        if self.iterates is not None:
            self.iterates.append(StackedPoint(X.copy()))
        if self.denom is not None and rel <= self.run.target_rel_subopt:
            return True
        if (self.run.target_rel_dist is not None and self.d0 is not None
                and dsq <= self.run.target_rel_dist * self.d0):
            return True
        return c >= self.run.max_comm

    def result(self, method: str, X: np.ndarray) -> SolverResult:
        return SolverResult(method, self.rows, StackedPoint(X.copy()), self.ledger,
                            self.f0, self.iterates)


def _check_shape(p: Problem, run: SolverRun) -> None:
    if run.x0.n != p.n or run.x0.d != p.d:
        raise ValueError("x0 shape does not match the problem")


# ---------------------------------------------------------------------------
# Deterministic penalty-oracle methods: prox family (pgd1/apgd1) communicates
# the average once and each client solves its regularized local problem;
# gradient family (pgd2/apgd2) takes one local gradient step and then the
# closed-form prox of the coupling penalty.


def pgd1(p: Problem, run: SolverRun, ledger: Optional[OracleLedger] = None) -> SolverResult:
    _check_shape(p, run)
    if p.lam <= 0:
        raise ValueError("pgd1 needs lambda > 0")
    ledger = ledger if ledger is not None else OracleLedger()
    batch = make_batch(p.losses)
    tr = _Trace(p, batch, run, ledger)
    beta = 1.0 / p.lam
    X = run.x0.blocks.copy()
    n = p.n
    if tr.record(0, X):
        return tr.result(run.method, X)
    for k in range(1, run.max_iters + 1):
        xbar = X.mean(axis=0)
        ledger.comm(1)
        X = batch.prox(beta, np.broadcast_to(xbar, (n, p.d)))
        ledger.prox(1)
        if tr.record(k, X):
            break
    return tr.result(run.method, X)


def apgd1(p: Problem, run: SolverRun, ledger: Optional[OracleLedger] = None) -> SolverResult:
    _check_shape(p, run)
    mu = p.constants.mu
    if p.lam <= 0 or mu <= 0:
        raise ValueError("apgd1 needs lambda > 0 and mu > 0")
    ledger = ledger if ledger is not None else OracleLedger()
    batch = make_batch(p.losses)
    tr = _Trace(p, batch, run, ledger)
    beta = 1.0 / p.lam
    q = (math.sqrt(p.lam) - math.sqrt(mu)) / (math.sqrt(p.lam) + math.sqrt(mu))
    X = run.x0.blocks.copy()
    Y = X.copy()
    n = p.n
    if tr.record(0, X):
        return tr.result(run.method, X)
    for k in range(1, run.max_iters + 1):
        ybar = Y.mean(axis=0)
        ledger.comm(1)
        X_new = batch.prox(beta, np.broadcast_to(ybar, (n, p.d)))
        ledger.prox(1)
        Y = X_new + q * (X_new - X)
        X = X_new
        if tr.record(k, X):
            break
    return tr.result(run.method, X)


def pgd2(p: Problem, run: SolverRun, ledger: Optional[OracleLedger] = None) -> SolverResult:
    _check_shape(p, run)
    L = p.constants.L
    ledger = ledger if ledger is not None else OracleLedger()
    batch = make_batch(p.losses)
    tr = _Trace(p, batch, run, ledger)
    lam = p.lam
    X = run.x0.blocks.copy()
    if tr.record(0, X):
        return tr.result(run.method, X)
    for k in range(1, run.max_iters + 1):
        Yt = X - batch.grad(X) / L
        ledger.grad(1)
        ledger.comm(1)
        X = (L * Yt + lam * Yt.mean(axis=0)) / (L + lam)
        if tr.record(k, X):
            break
    return tr.result(run.method, X)


def apgd2(p: Problem, run: SolverRun, ledger: Optional[OracleLedger] = None) -> SolverResult:
    _check_shape(p, run)
    L, mu = p.constants.L, p.constants.mu
    if mu <= 0:
        raise ValueError("apgd2 needs mu > 0")
    ledger = ledger if ledger is not None else OracleLedger()
    batch = make_batch(p.losses)
    tr = _Trace(p, batch, run, ledger)
    lam = p.lam
    rk = math.sqrt(L / mu)
    q = (rk - 1.0) / (rk + 1.0)
    X = run.x0.blocks.copy()
    Y = X.copy()
    if tr.record(0, X):
        return tr.result(run.method, X)
    for k in range(1, run.max_iters + 1):
        Yt = Y - batch.grad(Y) / L
        ledger.grad(1)
        ledger.comm(1)
        X_new = (L * Yt + lam * Yt.mean(axis=0)) / (L + lam)
        Y = X_new + q * (X_new - X)
        X = X_new
        if tr.record(k, X):
            break
    return tr.result(run.method, X)


# ---------------------------------------------------------------------------
# Inexact prox family: the local regularized problem is handed to an inner
# solver for a scheduled iteration count, warm-started at the extrapolated
# point. Outer momentum is identical to apgd1.


def _schedule_agd(k: int, n: int, mu: float, L: float, lam: float) -> int:
    base = math.sqrt((L + lam) / (mu + lam)) * math.log(
        1152.0 * L * lam * n * n * (2.0 * math.sqrt(lam / mu) + 1.0) ** 2 / mu**2
    )
    inc = 4.0 * math.sqrt(mu * (L + lam) / (lam * (mu + lam)))
    return max(1, math.ceil(base + inc * k))


def _schedule_katyusha(k: int, m: int, mu: float, L: float, lam: float) -> int:
    base = math.sqrt(m * (L + lam) / (mu + lam))
    inc = math.sqrt(m * mu * (L + lam) / (lam * (mu + lam)))
    return max(1, math.ceil(base + inc * k))


def _schedule_katyusha_theory(k: int, m: int, mu: float, L_tilde: float, lam: float,
                              f0: float, f_star: float) -> int:
    ratio = 2.0 * math.sqrt(lam / mu)
    R_sq = max(2.0 * (f0 - f_star) / (ratio * (ratio + 1.0)) ** 2, 1e-30)
    coef = m + math.sqrt(m * (L_tilde + lam) / (mu + lam))
    return max(1, math.ceil(coef * (math.log(1.0 / R_sq) + k * math.sqrt(mu / lam))))


def iapgd(p: Problem, run: SolverRun, sub: Subsolver,
          ledger: Optional[OracleLedger] = None) -> SolverResult:
    _check_shape(p, run)
    mu, L, Lt, m = (p.constants.mu, p.constants.L, p.constants.L_tilde, p.constants.m)
    lam = p.lam
    if lam < 2 * mu:
        raise ValueError("iapgd needs lambda >= 2*mu")
    ledger = ledger if ledger is not None else OracleLedger()
    batch = make_batch(p.losses)
    tr = _Trace(p, batch, run, ledger)
    q = (math.sqrt(lam) - math.sqrt(mu)) / (math.sqrt(lam) + math.sqrt(mu))
    schedule = run.method_params.get("schedule", "practical")
    if schedule not in ("practical", "theory"):
        raise ValueError(f"unknown schedule {schedule!r}")
    if schedule == "theory" and run.f_star is None:
        raise ValueError("the theory schedule needs f_star")
    stream = np.random.default_rng(np.random.SeedSequence(run.seed))

    X = run.x0.blocks.copy()
    Y = X.copy()
    if tr.record(0, X):
        return tr.result(run.method, X)

    def h_vals(Z, ybar):
        shift = Z - ybar
        return batch.value(Z) + 0.5 * lam * (shift * shift).sum(axis=1)

    for k in range(1, run.max_iters + 1):
        ybar = Y.mean(axis=0)
        ledger.comm(1)
        if sub.iters is not None:
            T = sub.iters
        elif sub.kind == "agd":
            T = _schedule_agd(k - 1, p.n, mu, L, lam)
        elif schedule == "theory":
            T = _schedule_katyusha_theory(k - 1, m, mu, Lt, lam, tr.f0, run.f_star)
        else:
            T = _schedule_katyusha(k - 1, m, mu, L, lam)
        h_before = h_vals(Y, ybar)
        if sub.kind == "agd":
            X_new = agd_solve(
                lambda Z: batch.grad(Z) + lam * (Z - ybar), Y, T, mu + lam, L + lam, ledger
            )
        else:
            handle = FiniteSumHandle(
                summand_grad=lambda j, Z: batch.summand_grad(j, Z) + lam * (Z - ybar),
                full_grad=lambda Z: batch.grad(Z) + lam * (Z - ybar),
                m=m, mu=mu + lam, L_tilde=Lt + lam,
            )
            X_new = katyusha_solve(handle, Y, T, stream, ledger)
        h_after = h_vals(X_new, ybar)
        bad = h_after > 2.0 * np.abs(h_before) + 1.0
        if bad.any():
            i = int(np.argmax(bad))
            raise RuntimeError(
                f"inner solver diverged on client {i} at outer step {k}: "
                f"local value went {h_before[i]:.6g} -> {h_after[i]:.6g} in {T} iterations"
            )
        Y = X_new + q * (X_new - X)
        X = X_new
        if tr.record(k, X):
            break
    return tr.result(run.method, X)


# ---------------------------------------------------------------------------
# Loopless stochastic pair. Both share one variance-reduced estimator g:
# a Bernoulli(p) coin picks between a local summand-difference step and an
# averaging step, and a Bernoulli(rho) coin refreshes the anchor w (with a
# full local gradient recompute and one round to average w). Rounds are
# charged on xi transitions; the initial anchor averaging costs one round.


class _CoinSource:
    """Buffered uniforms off one generator; order is draw order."""

    def __init__(self, gen: np.random.Generator, block: int = 8192):
        self.gen = gen
        self.block = block
        self.buf = gen.random(block)
        self.i = 0

    def next(self) -> float:
        if self.i >= self.buf.size:
            self.buf = self.gen.random(self.block)
            self.i = 0
        u = self.buf[self.i]
        self.i += 1
        return float(u)


class _ClientIndexSource:
    """One summand-index stream per client. Every call pops one draw from
    each stream, so the streams stay in lockstep and a single 2d buffer
    (refilled row-by-row from the per-client generators) preserves exactly
    the per-stream draw order."""

    def __init__(self, gens, m: int, block: int = 4096):
        self.gens = gens
        self.m = m
        self.block = block
        self.buf = np.stack([g.integers(0, m, size=block) for g in gens])
        self.pos = 0

    def next_vec(self) -> np.ndarray:
        if self.pos >= self.block:
            self.buf = np.stack(
                [g.integers(0, self.m, size=self.block) for g in self.gens]
            )
            self.pos = 0
        out = self.buf[:, self.pos]
        self.pos += 1
        return out


def vr_estimator(batch, lam: float, n: int, pr: float, X: np.ndarray, W: np.ndarray,
                 wbar: np.ndarray, GW: np.ndarray, xi: int, j) -> np.ndarray:
    """The shared variance-reduced gradient estimator, one block per client.

    xi = 0: summand-difference step using index j (scalar or one index per
    client) against the anchor W, whose full gradients GW are precomputed.
    xi = 1: averaging step built from the client deviations and the anchor
    average wbar. Unbiased over (xi, j) for any p in (0, 1).
    """
    if xi == 0:
        gx, gw = batch.summand_grad_pair(j, X, W)
        g = (gx - gw) / (n * (1.0 - pr))
        g += GW / n + (lam / n) * (W - wbar)
    else:
        xbar = X.mean(axis=0)
        g = (lam / (n * pr)) * (X - xbar)
        g -= ((1.0 / pr - 1.0) * lam / n) * (W - wbar)
        g += GW / n
    return g


def _stochastic_params(p: Problem, pr: float, rho: float):
    n, lam = p.n, p.lam
    Lt, mu = p.constants.L_tilde, p.constants.mu
    L_F = (lam + Lt) / n
    term = lam / (n * pr) if pr > 0 else 0.0
    big = max(Lt / (n * (1.0 - pr)), term)
    M = max(L_F, big)
    eta = 1.0 / (4.0 * M)
    theta2 = big / (2.0 * M)
    theta1 = min(0.5, math.sqrt((eta * mu / n) * max(0.5, theta2 / rho)))
    gamma = 1.0 / max(2.0 * mu / n, 4.0 * theta1 / eta)
    beta = 1.0 - gamma * mu / n
    return eta, theta1, theta2, gamma, beta


def _validate_coins(p: Problem, run: SolverRun):
    m = p.constants.m
    pr = run.method_params.get("p", p.lam / (p.lam + p.constants.L_tilde)
                               if run.method == "al2sgd_plus" else 1.0 / m)
    default_rho = pr * (1.0 - pr) if run.method == "al2sgd_plus" else 1.0 / m
    rho = run.method_params.get("rho", default_rho)
    if not 0.0 <= pr < 1.0:
        raise ValueError("p must lie in [0, 1)")
    if pr == 0.0 and p.lam > 0:
        raise ValueError("p = 0 only makes sense when lambda = 0")
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    return pr, rho


def _stochastic_loop(p: Problem, run: SolverRun, ledger: OracleLedger,
                     accelerated: bool) -> SolverResult:
    _check_shape(p, run)
    batch = make_batch(p.losses)
    tr = _Trace(p, batch, run, ledger)
    n, lam, m = p.n, p.lam, p.constants.m
    pr, rho = _validate_coins(p, run)
    eta, theta1, theta2, gamma, beta = _stochastic_params(p, pr, rho)

    seq = np.random.SeedSequence(run.seed)
    children = seq.spawn(n + 1)
    coins = _CoinSource(np.random.default_rng(children[0]))
    jsrc = _ClientIndexSource([np.random.default_rng(c) for c in children[1:]], m)

    Y = run.x0.blocks.copy()
    Z = Y.copy()
    W = Y.copy()
    GW = batch.grad(W)
    ledger.grad(1)
    wbar = W.mean(axis=0)
    ledger.comm(1)  # anchor average is known to the server before step one
    prev_xi = 0
    trace_every = 1 if pr == 0.0 else None
    last_comm = ledger.comm_rounds

    if tr.record(0, Y):
        return tr.result(run.method, Y)

    for k in range(1, run.max_iters + 1):
        if accelerated:
            X = theta1 * Z + theta2 * W + (1.0 - theta1 - theta2) * Y
        else:
            X = Y
        xi = 1 if coins.next() < pr else 0
        if xi != prev_xi:
            ledger.comm(1)
        prev_xi = xi
        if xi == 0:
            j = jsrc.next_vec()
            ledger.summand(1)
        else:
            j = None
        g = vr_estimator(batch, lam, n, pr, X, W, wbar, GW, xi, j)
        Y_new = X - eta * g
        if accelerated:
            Z = beta * Z + (1.0 - beta) * X + (gamma / eta) * (Y_new - X)
        if coins.next() < rho:
            W = Y_new.copy()
            GW = batch.grad(W)
            ledger.grad(1)
            wbar = W.mean(axis=0)
            ledger.comm(1)
        Y = Y_new
        if ledger.comm_rounds != last_comm or (trace_every and k % trace_every == 0):
            last_comm = ledger.comm_rounds
            if tr.record(k, Y):
                break
    return tr.result(run.method, Y)


def al2sgd_plus(p: Problem, run: SolverRun,
                ledger: Optional[OracleLedger] = None) -> SolverResult:
    return _stochastic_loop(p, run, ledger if ledger is not None else OracleLedger(), True)


def l2sgd_plus(p: Problem, run: SolverRun,
               ledger: Optional[OracleLedger] = None) -> SolverResult:
    return _stochastic_loop(p, run, ledger if ledger is not None else OracleLedger(), False)


def solve(p: Problem, run: SolverRun, ledger: Optional[OracleLedger] = None) -> SolverResult:
    """Dispatch on run.method; the iapgd variants build their subsolver here."""
    if run.method == "iapgd_agd":
        return iapgd(p, run, Subsolver("agd", run.method_params.get("t_fixed")), ledger)
    if run.method == "iapgd_katyusha":
        return iapgd(p, run, Subsolver("katyusha", run.method_params.get("t_fixed")), ledger)
    fn = {
        "pgd1": pgd1, "pgd2": pgd2, "apgd1": apgd1, "apgd2": apgd2,
        "l2sgd_plus": l2sgd_plus, "al2sgd_plus": al2sgd_plus,
    }[run.method]
    return fn(p, run, ledger)
