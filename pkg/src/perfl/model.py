"""Problem container, stacked iterates, the mean-coupling penalty, and oracle metering.

The objective throughout is

    F(x) = (1/n) sum_i f_i(x_i) + lam * psi(x),
    psi(x) = (1/2n) sum_i ||x_i - xbar||^2,

where x stacks one d-dimensional block per client. Everything here is pure
value semantics; ledger mutation is left to the solver loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "StackedPoint",
    "SmoothnessInfo",
    "Problem",
    "OracleLedger",
    "psi_value",
    "psi_grad",
    "objective_value",
    "objective_grad",
    "bregman_F",
]


@dataclass
class StackedPoint:
    """n client blocks of dimension d, stored as an (n, d) array."""

    blocks: np.ndarray

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=float)
        if self.blocks.ndim != 2:
            raise ValueError("blocks must be an (n, d) array")
        n, d = self.blocks.shape
        if n < 1 or d < 1:
            raise ValueError("need n >= 1 and d >= 1")

    @classmethod
    def zeros(cls, n: int, d: int) -> "StackedPoint":
        return cls(np.zeros((n, d)))

    @classmethod
    def from_flat(cls, v, n: int, d: int) -> "StackedPoint":
        """Rebuild from a flat length-n*d vector (client blocks contiguous)."""
        v = np.asarray(v, dtype=float)
        if v.size != n * d:
            raise ValueError(f"expected {n * d} entries, got {v.size}")
        return cls(v.reshape(n, d).copy())

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def d(self) -> int:
        return self.blocks.shape[1]

    def mean(self) -> np.ndarray:
        return self.blocks.mean(axis=0)

    def flat(self) -> np.ndarray:
        """Flat copy, blocks concatenated in client order."""
        return self.blocks.reshape(-1).copy()

    def copy(self) -> "StackedPoint":
        return StackedPoint(self.blocks.copy())

    def dist_sq(self, other: "StackedPoint") -> float:
        return float(((self.blocks - other.blocks) ** 2).sum())

    def __add__(self, other):
        return StackedPoint(self.blocks + other.blocks)

    def __sub__(self, other):
        return StackedPoint(self.blocks - other.blocks)

    def __mul__(self, scalar):
        return StackedPoint(self.blocks * float(scalar))

    __rmul__ = __mul__


@dataclass(frozen=True)
class SmoothnessInfo:
    """Curvature summary of a local loss (or of a whole problem, by worst case).

    mu: strong-convexity modulus, L: smoothness of the full local loss,
    L_tilde: smoothness of each summand, m: summand count (1 when the loss
    is not a finite sum).
    """

    mu: float
    L: float
    L_tilde: float
    m: int

    def validate(self, rel_tol: float = 1e-9) -> None:
        """Enforce L_tilde >= L >= L_tilde/m >= mu > 0 up to rounding slack."""
        slack = 1.0 + rel_tol
        if not (self.mu > 0):
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not (self.L_tilde * slack >= self.L):
            raise ValueError(f"need L_tilde >= L, got {self.L_tilde} < {self.L}")
        if not (self.L * slack >= self.L_tilde / self.m):
            raise ValueError(f"need L >= L_tilde/m, got {self.L} < {self.L_tilde / self.m}")
        if not (self.L_tilde / self.m * slack >= self.mu):
            raise ValueError(f"need L_tilde/m >= mu, got {self.L_tilde / self.m} < {self.mu}")


@dataclass
class Problem:
    """n local losses, the coupling weight, and the merged curvature constants."""

    lam: float
    losses: list
    constants: SmoothnessInfo

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.losses:
            raise ValueError("need at least one local loss")
        d = self.losses[0].d
        for i, loss in enumerate(self.losses):
            if loss.d != d:
                raise ValueError(f"loss {i} has dimension {loss.d}, expected {d}")

    @classmethod
    def build(cls, losses, lam: float) -> "Problem":
        """Assemble a problem, merging per-loss constants by worst case.

        mu is the smallest per-client modulus, L and L_tilde the largest
        smoothness bounds; m must agree across clients because the stochastic
        solvers share one coin schedule.
        """
        infos = [loss.estimate_constants() for loss in losses]
        ms = {info.m for info in infos}
        if len(ms) != 1:
            raise ValueError(f"clients disagree on summand count: {sorted(ms)}")
        merged = SmoothnessInfo(
            mu=min(info.mu for info in infos),
            L=max(info.L for info in infos),
            L_tilde=max(info.L_tilde for info in infos),
            m=ms.pop(),
        )
        merged.validate()
        return cls(lam=float(lam), losses=list(losses), constants=merged)

    @property
    def n(self) -> int:
        return len(self.losses)

    @property
    def d(self) -> int:
        return self.losses[0].d


@dataclass
class OracleLedger:
    """Monotone counters for communication rounds and local-oracle calls.

    One unit means all n clients issued the same call simultaneously.
    """

    comm_rounds: int = 0
    grad_calls: int = 0
    prox_calls: int = 0
    summand_grad_calls: int = 0

    def _bump(self, attr: str, units: int) -> None:
        if units < 0:
            raise ValueError("ledger counters only move forward")
        setattr(self, attr, getattr(self, attr) + units)

    def comm(self, rounds: int = 1) -> None:
        self._bump("comm_rounds", rounds)

    def grad(self, units: int = 1) -> None:
        self._bump("grad_calls", units)

    def prox(self, units: int = 1) -> None:
        self._bump("prox_calls", units)

    def summand(self, units: int = 1) -> None:
        self._bump("summand_grad_calls", units)

    def snapshot(self) -> tuple:
        return (self.comm_rounds, self.grad_calls, self.prox_calls, self.summand_grad_calls)


def psi_value(x: StackedPoint) -> float:
    """Mean-coupling penalty (1/2n) sum_i ||x_i - xbar||^2."""
    dev = x.blocks - x.blocks.mean(axis=0)
    return float((dev * dev).sum() / (2 * x.n))


def psi_grad(x: StackedPoint) -> StackedPoint:
    """Blockwise gradient of the penalty; block i is (1/n)(x_i - xbar)."""
    return StackedPoint((x.blocks - x.blocks.mean(axis=0)) / x.n)


def objective_value(p: Problem, x: StackedPoint) -> float:
    if x.n != p.n or x.d != p.d:
        raise ValueError("point shape does not match the problem")
    fx = sum(loss.value(x.blocks[i]) for i, loss in enumerate(p.losses)) / p.n
    return fx + p.lam * psi_value(x)


def objective_grad(p: Problem, x: StackedPoint) -> StackedPoint:
    """Block i is (1/n) grad f_i(x_i) + (lam/n)(x_i - xbar)."""
    if x.n != p.n or x.d != p.d:
        raise ValueError("point shape does not match the problem")
    g = np.empty_like(x.blocks)
    for i, loss in enumerate(p.losses):
        g[i] = loss.grad(x.blocks[i])
    g /= p.n
    g += p.lam * (x.blocks - x.blocks.mean(axis=0)) / p.n
    return StackedPoint(g)


def bregman_F(p: Problem, w: StackedPoint, x: StackedPoint) -> float:
    """Bregman divergence D_F(w, x) = F(w) - F(x) - <grad F(x), w - x>."""
    gap = objective_value(p, w) - objective_value(p, x)
    inner = float((objective_grad(p, x).blocks * (w.blocks - x.blocks)).sum())
    return gap - inner
