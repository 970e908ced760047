"""Inner solvers for the shifted local subproblem h(z) = f(z) + (lam/2)||z - c||^2.

Both run a fixed iteration budget and start exactly at the supplied z0 (the
outer loop warm-starts them at the extrapolated iterate). They operate on
plain arrays and work unchanged whether z0 is one client block (d,) or a
stack (n, d); randomness for the stochastic solver comes from a caller-owned
generator so outer loops control determinism.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = ["Subsolver", "FiniteSumHandle", "agd_solve", "katyusha_solve"]

_KINDS = ("agd", "katyusha")


@dataclass
class Subsolver:
    """Inner-solver selection; iters overrides the schedule when set."""

    kind: str
    iters: Optional[int] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown subsolver kind {self.kind!r}, expected one of {_KINDS}")
        if self.iters is not None and self.iters < 1:
            raise ValueError("iters must be >= 1")


@dataclass
class FiniteSumHandle:
    """Finite-sum view of a subproblem: m summands, each L_tilde-smooth,
    the whole mu-strongly convex. Gradient callables must preserve shape."""

    summand_grad: Callable
    full_grad: Callable
    m: int
    mu: float
    L_tilde: float


def agd_solve(grad_fn, z0, iters: int, mu: float, L: float, ledger=None) -> np.ndarray:
    """Constant-momentum accelerated gradient descent, stepsize 1/L.

    Momentum (sqrt(kappa)-1)/(sqrt(kappa)+1) with kappa = L/mu; consumes
    exactly `iters` gradient evaluations.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not (0 < mu <= L):
        raise ValueError("need 0 < mu <= L")
    rk = np.sqrt(L / mu)
    theta = (rk - 1.0) / (rk + 1.0)
    x = np.array(z0, dtype=float)
    y = x.copy()
    for _ in range(iters):
        x_new = y - grad_fn(y) / L
        y = x_new + theta * (x_new - x)
        x = x_new
    if ledger is not None:
        ledger.grad(iters)
    return x


def katyusha_solve(handle: FiniteSumHandle, z0, iters: int, stream: np.random.Generator,
                   ledger=None) -> np.ndarray:
    """Loopless Katyusha: variance-reduced accelerated SGD with an anchor
    point refreshed with probability 1/m per iteration.

    Per iteration: one summand index per client block, two summand-gradient
    evaluations (at the blend point and at the anchor), plus a full gradient
    whenever the anchor moves. Returns the y-iterate after `iters` steps.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    m = handle.m
    sigma = handle.mu / handle.L_tilde
    theta2 = 0.5
    theta1 = min(np.sqrt(2.0 * sigma * m / 3.0), 0.5)
    eta = theta2 / ((1.0 + theta2) * theta1)
    p_anchor = 1.0 / m

    z = np.array(z0, dtype=float)
    y = z.copy()
    w = z.copy()
    gw_full = handle.full_grad(w)
    if ledger is not None:
        ledger.grad(1)

    batched = z.ndim == 2
    for _ in range(iters):
        x = theta1 * z + theta2 * w + (1.0 - theta1 - theta2) * y
        if batched:
            j = stream.integers(m, size=z.shape[0])
        else:
            j = int(stream.integers(m))
        g = handle.summand_grad(j, x) - handle.summand_grad(j, w) + gw_full
        if ledger is not None:
            ledger.summand(2)
        z_new = (eta * sigma * x + z - (eta / handle.L_tilde) * g) / (1.0 + eta * sigma)
        y = x + theta1 * (z_new - z)
        z = z_new
        if stream.random() < p_anchor:
            w = y.copy()
            gw_full = handle.full_grad(w)
            if ledger is not None:
                ledger.grad(1)
    return y
