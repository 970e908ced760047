"""Local losses: quadratics and l2-regularized logistic regression over data rows.

Each loss exposes value/grad/summand_grad/prox plus a curvature estimate.
Stacked batch evaluators live at the bottom; solver loops use them so one
iteration over n clients is a handful of einsums instead of a Python loop.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import SmoothnessInfo

__all__ = [
    "QuadraticLoss",
    "LogisticLoss",
    "loss_grad",
    "summand_grad",
    "loss_prox",
    "estimate_constants",
    "make_batch",
    "client_map",
]

PROX_TOL = 1e-10
_PROX_MAX_ITER = 500_000


def _worker_cap() -> int:
    raw = os.environ.get("PERFL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def client_map(fn, count: int) -> list:
    """Apply fn to client indices 0..count-1, in parallel when PERFL_THREADS
    allows. Output order is always by index, so schedules cannot leak into
    results."""
    cap = _worker_cap()
    if cap <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=min(cap, count)) as pool:
        return list(pool.map(fn, range(count)))


@dataclass
class QuadraticLoss:
    """f(z) = 1/2 z^T A z + b^T z + (mu_shift/2)||z||^2 with A symmetric PSD."""

    A: np.ndarray
    b: np.ndarray
    mu_shift: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        if self.b.shape != (self.A.shape[0],):
            raise ValueError("b must match A")
        if not np.allclose(self.A, self.A.T, atol=1e-8):
            raise ValueError("A must be symmetric")
        if self.mu_shift < 0:
            raise ValueError("mu_shift must be non-negative")
        # Hessian with the ridge folded in; everything below works off this.
        self._H = self.A + self.mu_shift * np.eye(self.A.shape[0])

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return 1

    def value(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self._H @ z + self.b @ z)

    def grad(self, z) -> np.ndarray:
        return self._H @ np.asarray(z, dtype=float) + self.b

    def summand_grad(self, j: int, z) -> np.ndarray:
        if j != 0:
            raise IndexError("quadratic loss is a single-summand sum")
        return self.grad(z)

    def prox(self, beta: float, v, tol: float = PROX_TOL) -> np.ndarray:
        """argmin_z f(z) + (1/2 beta)||z - v||^2, solved exactly."""
        if beta <= 0:
            raise ValueError("beta must be positive")
        v = np.asarray(v, dtype=float)
        M = self._H + (1.0 / beta) * np.eye(self.d)
        return np.linalg.solve(M, v / beta - self.b)

    def estimate_constants(self) -> SmoothnessInfo:
        evals = np.linalg.eigvalsh(self._H)
        lo, hi = float(evals[0]), float(evals[-1])
        return SmoothnessInfo(mu=lo, L=hi, L_tilde=hi, m=1)


@dataclass
class LogisticLoss:
    """(1/m) sum_j [ log(1+exp(y_j a_j^T z)) + (reg/2)||z||^2 ] over m rows.

    Labels sit inside the exponent with a plus sign; flipping label signs
    recovers the more common convention. The ridge is part of every summand,
    so averaged summand gradients reproduce the full gradient exactly.
    """

    rows: np.ndarray
    labels: np.ndarray
    reg: float = 1e-4

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.rows.ndim != 2:
            raise ValueError("rows must be an (m, d) array")
        if self.labels.shape != (self.rows.shape[0],):
            raise ValueError("one label per row required")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if self.reg <= 0:
            raise ValueError("reg must be positive")
        self._L_cache = None

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    def _margins(self, z) -> np.ndarray:
        return self.labels * (self.rows @ np.asarray(z, dtype=float))

    def value(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(np.logaddexp(0.0, self._margins(z)).mean() + 0.5 * self.reg * z @ z)

    def grad(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        w = self.labels * expit(self._margins(z))
        return self.rows.T @ w / self.m + self.reg * z

    def summand_grad(self, j: int, z) -> np.ndarray:
        if not 0 <= j < self.m:
            raise IndexError(f"summand index {j} out of range [0, {self.m})")
        z = np.asarray(z, dtype=float)
        a, y = self.rows[j], self.labels[j]
        return y * expit(y * (a @ z)) * a + self.reg * z

    def prox(self, beta: float, v, tol: float = PROX_TOL) -> np.ndarray:
        """Accelerated gradient on the prox subproblem, warm-started at v.

        Runs until the stationarity residual ||grad f(z) + (z-v)/beta|| drops
        below tol; the subproblem is (reg + 1/beta)-strongly convex so this is
        geometric.
        """
        if beta <= 0:
            raise ValueError("beta must be positive")
        v = np.asarray(v, dtype=float)
        out = _logistic_prox_batch(
            self.rows[None], self.labels[None], self.reg,
            self._full_smoothness(), beta, v[None], tol,
        )
        return out[0]

    def _full_smoothness(self) -> float:
        if self._L_cache is None:
            self._L_cache = _logistic_full_smoothness(self.rows, self.reg)
        return self._L_cache

    def estimate_constants(self) -> SmoothnessInfo:
        per_row = 0.25 * (self.rows * self.rows).sum(axis=1)
        return SmoothnessInfo(
            mu=self.reg,
            L=self._full_smoothness(),
            L_tilde=float(per_row.max()) + self.reg,
            m=self.m,
        )


def _logistic_full_smoothness(rows: np.ndarray, reg: float) -> float:
    """Largest eigenvalue of (1/4m) sum_j a_j a_j^T, plus the ridge.

    Works on whichever Gram matrix is smaller, m x m or d x d.
    """
    m, d = rows.shape
    gram = rows @ rows.T if m <= d else rows.T @ rows
    top = float(np.linalg.eigvalsh(gram)[-1])
    return top / (4 * m) + reg


def _logistic_prox_batch(rows, labels, reg, L_full, beta, V, tol):
    """Vectorized AGD across clients; rows (n,m,d), V (n,d). Returns (n,d)."""
    inv_beta = 1.0 / beta
    mu_sub = reg + inv_beta
    L_sub = L_full + inv_beta
    q = np.sqrt(L_sub / mu_sub)
    theta = (q - 1.0) / (q + 1.0)
    m = rows.shape[1]

    def sub_grad(Z):
        marg = labels * np.einsum("nmd,nd->nm", rows, Z)
        w = labels * expit(marg)
        g = np.einsum("nm,nmd->nd", w, rows) / m + reg * Z
        return g + inv_beta * (Z - V)

    X = V.copy()
    Y = V.copy()
    for it in range(_PROX_MAX_ITER):
        X_new = Y - sub_grad(Y) / L_sub
        Y = X_new + theta * (X_new - X)
        X = X_new
        if it % 5 == 0 or it == _PROX_MAX_ITER - 1:
            res = np.sqrt((sub_grad(X) ** 2).sum(axis=1)).max()
            if res <= tol:
                return X
    raise RuntimeError(
        f"prox subproblem stalled: residual {res:.3e} after {_PROX_MAX_ITER} "
        f"iterations, wanted {tol:.3e}"
    )


def loss_grad(loss, z) -> np.ndarray:
    return loss.grad(z)


def summand_grad(loss, j: int, z) -> np.ndarray:
    return loss.summand_grad(j, z)


def loss_prox(loss, beta: float, v, tol: float = PROX_TOL) -> np.ndarray:
    return loss.prox(beta, v, tol=tol)


def estimate_constants(loss) -> SmoothnessInfo:
    return loss.estimate_constants()


# ---------------------------------------------------------------------------
# Stacked batch evaluators. One instance serves one solver run; prox caches
# a factorization per beta, which is safe because losses are immutable.


class QuadraticBatch:
    def __init__(self, losses):
        self.H = np.stack([l._H for l in losses])
        self.b = np.stack([l.b for l in losses])
        self.n, self.d = self.b.shape
        self._prox_cache: dict = {}

    def value(self, X) -> np.ndarray:
        quad = 0.5 * np.einsum("nij,ni,nj->n", self.H, X, X)
        return quad + np.einsum("ni,ni->n", self.b, X)

    def grad(self, X) -> np.ndarray:
        return np.einsum("nij,nj->ni", self.H, X) + self.b

    def summand_grad(self, j_idx, X) -> np.ndarray:
        if np.any(j_idx != 0):
            raise IndexError("quadratic loss is a single-summand sum")
        return self.grad(X)

    def summand_grad_pair(self, j_idx, X, W):
        return self.summand_grad(j_idx, X), self.summand_grad(j_idx, W)

    def prox(self, beta: float, V, tol: float = PROX_TOL) -> np.ndarray:
        Minv = self._prox_cache.get(beta)
        if Minv is None:
            M = self.H + (1.0 / beta) * np.eye(self.d)
            Minv = np.linalg.inv(M)
            self._prox_cache[beta] = Minv
        return np.einsum("nij,nj->ni", Minv, V / beta - self.b)


class LogisticBatch:
    def __init__(self, losses):
        self.rows = np.stack([l.rows for l in losses])
        self.labels = np.stack([l.labels for l in losses])
        self.reg = losses[0].reg
        if any(l.reg != self.reg for l in losses):
            raise ValueError("clients disagree on the ridge weight")
        self.n, self.m, self.d = self.rows.shape
        self._L_full = max(l._full_smoothness() for l in losses)

    def value(self, X) -> np.ndarray:
        marg = self.labels * np.einsum("nmd,nd->nm", self.rows, X)
        ridge = 0.5 * self.reg * (X * X).sum(axis=1)
        return np.logaddexp(0.0, marg).mean(axis=1) + ridge

    def grad(self, X) -> np.ndarray:
        marg = self.labels * np.einsum("nmd,nd->nm", self.rows, X)
        w = self.labels * expit(marg)
        return np.einsum("nm,nmd->nd", w, self.rows) / self.m + self.reg * X

    def summand_grad(self, j_idx, X) -> np.ndarray:
        idx = np.arange(self.n)
        a = self.rows[idx, j_idx]
        y = self.labels[idx, j_idx]
        t = y * (a * X).sum(axis=1)
        return (y * expit(t))[:, None] * a + self.reg * X

    def summand_grad_pair(self, j_idx, X, W):
        """Both gradients of summand j, sharing the row gather (hot path of
        the variance-reduced estimator)."""
        idx = np.arange(self.n)
        a = self.rows[idx, j_idx]
        y = self.labels[idx, j_idx]
        tx = y * (a * X).sum(axis=1)
        tw = y * (a * W).sum(axis=1)
        gx = (y * expit(tx))[:, None] * a + self.reg * X
        gw = (y * expit(tw))[:, None] * a + self.reg * W
        return gx, gw

    def prox(self, beta: float, V, tol: float = PROX_TOL) -> np.ndarray:
        return _logistic_prox_batch(
            self.rows, self.labels, self.reg, self._L_full, beta, V, tol
        )


class GenericBatch:
    """Per-client fallback for loss lists without a stacked fast path.
    Honors PERFL_THREADS for the embarrassingly parallel per-client calls."""

    def __init__(self, losses):
        self.losses = losses
        self.n = len(losses)

    def value(self, X) -> np.ndarray:
        return np.array(client_map(lambda i: self.losses[i].value(X[i]), self.n))

    def grad(self, X) -> np.ndarray:
        return np.stack(client_map(lambda i: self.losses[i].grad(X[i]), self.n))

    def summand_grad(self, j_idx, X) -> np.ndarray:
        return np.stack(
            client_map(lambda i: self.losses[i].summand_grad(int(j_idx[i]), X[i]), self.n)
        )

    def summand_grad_pair(self, j_idx, X, W):
        return self.summand_grad(j_idx, X), self.summand_grad(j_idx, W)

    def prox(self, beta: float, V, tol: float = PROX_TOL) -> np.ndarray:
        return np.stack(
            client_map(lambda i: self.losses[i].prox(beta, V[i], tol=tol), self.n)
        )


def make_batch(losses):
    kinds = {type(l) for l in losses}
    if kinds == {QuadraticLoss}:
        return QuadraticBatch(losses)
    if kinds == {LogisticLoss}:
        return LogisticBatch(losses)
    return GenericBatch(losses)
