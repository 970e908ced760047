"""Adversarial quadratic instances whose optimum decays geometrically across
coordinates, plus certification of the communication lower bound against a
solver trace.

Two client groups couple disjoint coordinate pairs in alternation, so each
averaging round can extend the reachable span by at most one coordinate while
the optimum has full support. The decay rate gamma is the relevant eigenvalue
of the 2x2 transfer matrix relating consecutive optimal coordinate pairs; the
top-coordinate closure coefficient b is chosen so the optimum follows that
eigenvector exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .losses import QuadraticLoss
from .model import Problem, StackedPoint

__all__ = [
    "LowerBoundInstance",
    "CertifyReport",
    "build_instance",
    "exact_optimum",
    "certify_bound",
    "build_nesterov_instance",
    "transfer_matrix",
]

SUPPORT_EPS = 1e-12


def transfer_matrix(c: float, s: float, r: float) -> np.ndarray:
    """2x2 map sending the optimal pair (either (y_i, z_i) or (z_i, y_i),
    alternating with i) to the next one; s = mu/lambda."""
    t = (c + s + r) / c
    return np.array([[-r / c, t], [-t, t * (c + s + r) / r - c / r]])


def _gamma_even_branch(s: float, r: float) -> float:
    root = math.sqrt(s * (s + 2 * r) * (s + 2) * (s + 2 * r + 2))
    return (s * s + 2 * s + 2 * r + 2 * r * s - root) / (2 * r)


def _gamma_small_L_branch(s: float, r: float, delta: float) -> float:
    root = math.sqrt((2 * delta + 1) * (s + 2 * r) * (s + 2 * r + 2 * delta * s))
    return (s + 2 * r + 2 * delta * r + 2 * delta * s - root) / (2 * delta * r)


@dataclass
class LowerBoundInstance:
    n: int
    T: int
    mu: float
    L: float
    lam: float
    a: float
    b: float
    c: float
    r: float
    gamma: float
    rate_bound: float
    delta: Optional[float]
    problem: Problem
    smoothness_exceeds_requested: bool
    group1_count: int
    _xstar: Optional[StackedPoint] = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return 2 * self.T


def build_instance(n: int, T: int, mu: float, L: float, lam: float) -> LowerBoundInstance:
    """Assemble the two-group adversarial instance.

    Chain parameter c is 1 when L >= lam + mu, else delta*mu/lam with
    delta = (L - mu)/mu, which makes the decay-rate floor match the
    resolvent/gradient regime split. Needs L >= 2*mu so delta >= 1.
    """
    if not (L > mu > 0):
        raise ValueError("need L > mu > 0")
    if lam < mu:
        raise ValueError("need lambda >= mu")
    if n < 2 or T < 2:
        raise ValueError("need n >= 2 and T >= 2")
    s = mu / lam
    even = n % 2 == 0
    M = n // 2
    r = 0.5 if even else M / n

    if L >= lam + mu:
        c, delta = 1.0, None
        gamma = _gamma_even_branch(s, r)
        rate_bound = 1.0 - 10.0 * math.sqrt(s)
    else:
        delta = (L - mu) / mu
        if delta < 1.0:
            raise ValueError(
                f"construction needs L >= 2*mu (delta = (L-mu)/mu = {delta:.4g} < 1)"
            )
        c = delta * s
        gamma = _gamma_small_L_branch(s, r, delta)
        rate_bound = 1.0 - 10.0 * math.sqrt(1.0 / delta)

    d = 2 * T
    if gamma <= 0 or d * math.log(max(gamma, 1e-320)) < math.log(1e-300):
        raise ValueError(
            f"optimum underflows double precision: gamma={gamma:.6g} over {d} coordinates"
        )
    if gamma < rate_bound - 1e-12:
        raise AssertionError(f"decay rate {gamma} fell below its floor {rate_bound}")

    # Closure coefficient: the top-coordinate stationarity equation must hold
    # on the transfer eigenvector (v1, 1); the odd-n group-1 scaling carries
    # into b because the b-term itself is not scaled.
    v1 = (c + s + r) / (c * gamma + r)
    b = r * v1 - s - r
    scale = 1.0 if even else (M + 1) / M
    b *= scale
    if b < -1e-12:
        raise AssertionError(f"closure coefficient came out negative: b = {b}")
    b = max(b, 0.0)
    a = 1.0

    A1 = scale * mu * np.eye(d)
    for i in range(1, T):
        lo, hi = 2 * i - 1, 2 * i  # 1-based pair (2i, 2i+1)
        A1[lo, lo] += scale * lam * c
        A1[hi, hi] += scale * lam * c
        A1[lo, hi] -= scale * lam * c
        A1[hi, lo] -= scale * lam * c
    A1[d - 1, d - 1] += lam * b
    u1 = np.zeros(d)
    u1[0] = a

    A2 = mu * np.eye(d)
    for i in range(T):
        lo, hi = 2 * i, 2 * i + 1  # 1-based pair (2i+1, 2i+2)
        A2[lo, lo] += lam * c
        A2[hi, hi] += lam * c
        A2[lo, hi] -= lam * c
        A2[hi, lo] -= lam * c
    u2 = np.zeros(d)

    g1 = n // 2 if even else M
    losses = [QuadraticLoss(A1, u1) for _ in range(g1)]
    losses += [QuadraticLoss(A2, u2) for _ in range(n - g1)]
    problem = Problem.build(losses, lam)
    exceeds = problem.constants.L > L * (1 + 1e-9)

    return LowerBoundInstance(
        n=n, T=T, mu=mu, L=L, lam=lam, a=a, b=float(b), c=c, r=r,
        gamma=gamma, rate_bound=rate_bound, delta=delta, problem=problem,
        smoothness_exceeds_requested=exceeds, group1_count=g1,
    )


def exact_optimum(inst: LowerBoundInstance) -> Tuple[StackedPoint, float]:
    """Solve the stationarity system directly and fit the decay rate.

    Solves (A_i + lam I)x_i - (lam/n) sum_j x_j = -u_i for all i as one
    symmetric positive definite system, then reads off the alternating
    coordinate pairs of the two group optima and returns the median ratio
    of consecutive pair norms.
    """
    if inst._xstar is None:
        n, d = inst.n, inst.d
        H = np.zeros((n * d, n * d))
        rhs = np.zeros(n * d)
        lam_avg = inst.lam / n * np.eye(d)
        for i, loss in enumerate(inst.problem.losses):
            sl = slice(i * d, (i + 1) * d)
            H[sl, sl] = loss._H + inst.lam * np.eye(d)
            rhs[i * d:(i + 1) * d] = -loss.b
            for j in range(n):
                H[sl, j * d:(j + 1) * d] -= lam_avg
        x = np.linalg.solve(H, rhs)
        inst._xstar = StackedPoint.from_flat(x, n, d)
    xs = inst._xstar

    y_opt = xs.blocks[0]           # any group-1 client
    z_opt = xs.blocks[inst.n - 1]  # any group-2 client
    pairs = []
    for i in range(1, inst.d + 1):
        if i % 2 == 0:
            pairs.append(np.array([z_opt[i - 1], y_opt[i - 1]]))
        else:
            pairs.append(np.array([y_opt[i - 1], z_opt[i - 1]]))
    norms = np.array([np.linalg.norm(w) for w in pairs])
    ratios = norms[1:] / norms[:-1]
    return xs, float(np.median(ratios))


@dataclass
class CertifyReport:
    ok: bool
    rate: float
    dist0_sq: float
    checked: int
    bound_violations: List[int]
    support_violations: List[int]
    max_support: int
    # per trace point: (index, comm_rounds, dist_sq, bound, support, passed)
    rows: List[tuple] = field(default_factory=list)

    def summary(self) -> str:
        verdict = "certified" if self.ok else "VIOLATED"
        return (
            f"{verdict}: {self.checked} trace points against rate {self.rate:.6g}; "
            f"bound violations {self.bound_violations or 'none'}, "
            f"support violations {self.support_violations or 'none'} "
            f"(max per-client support {self.max_support})"
        )


def certify_bound(inst: LowerBoundInstance, points: List[StackedPoint],
                  comms: List[int]) -> CertifyReport:
    """Check every trace point against the communication lower bound.

    For a span-respecting solver started at zero, the squared distance to the
    optimum must stay above (1/4) * rate^(C(k)+1) * ||x0 - xstar||^2, and each
    client block may have at most C(k)+1 coordinates away from zero.
    """
    if len(points) != len(comms):
        raise ValueError("one communication count per trace point required")
    if not points:
        raise ValueError("empty trace")
    xs, _ = exact_optimum(inst)
    rate = max(1.0 - 10.0 * max(math.sqrt(inst.mu / inst.lam),
                                math.sqrt(inst.mu / (inst.L - inst.mu))), 0.0)
    d0 = points[0].dist_sq(xs)
    bound_bad, support_bad = [], []
    max_support = 0
    rows = []
    for idx, (pt, ck) in enumerate(zip(points, comms)):
        dist = pt.dist_sq(xs)
        bound = 0.25 * rate ** (ck + 1) * d0
        ok_bound = dist >= bound * (1 - 1e-9)
        if not ok_bound:
            bound_bad.append(ck)
        support = int((np.abs(pt.blocks) > SUPPORT_EPS).sum(axis=1).max())
        max_support = max(max_support, support)
        ok_support = support <= ck + 1
        if not ok_support:
            support_bad.append(ck)
        rows.append((idx, ck, dist, bound, support, ok_bound and ok_support))
    return CertifyReport(
        ok=not bound_bad and not support_bad,
        rate=rate,
        dist0_sq=d0,
        checked=len(points),
        bound_violations=bound_bad,
        support_violations=support_bad,
        max_support=max_support,
        rows=rows,
    )


def build_nesterov_instance(d: int, mu: float, L: float, n: int, lam: float = 1.0) -> Problem:
    """All clients share the classical chained worst-case quadratic.

    f(z) = ((L-mu)/4) * (z^T T z / 2 - z_1) + (mu/2)||z||^2 with T the
    second-difference chain (last diagonal entry 1), so the Hessian spectrum
    sits inside (mu, L) and the gradient at any point with support {1..j}
    has support inside {1..j+1}.
    """
    if not (L > mu > 0):
        raise ValueError("need L > mu > 0")
    Tm = 2.0 * np.eye(d) - np.diag(np.ones(d - 1), 1) - np.diag(np.ones(d - 1), -1)
    Tm[d - 1, d - 1] = 1.0
    coef = (L - mu) / 4.0
    u = np.zeros(d)
    u[0] = -coef
    loss = QuadraticLoss(coef * Tm, u, mu_shift=mu)
    return Problem.build([loss] * n, lam)
