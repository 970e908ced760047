"""Shared fixtures and independent reference oracles.

Everything here recomputes quantities from first principles (finite
differences, dense eigensolves, exact linear algebra) so the tests never
trust the code paths they are checking.
"""

import numpy as np
import pytest

from perfl.losses import LogisticLoss, QuadraticLoss
from perfl.model import Problem, SmoothnessInfo


def fd_grad(f, z, h=1e-6):
    """Central finite differences, one coordinate at a time."""
    z = np.asarray(z, dtype=float)
    g = np.zeros(z.size)
    for i in range(z.size):
        e = np.zeros(z.size)
        e[i] = h
        g[i] = (f(z + e) - f(z - e)) / (2.0 * h)
    return g


def rel_err(approx, exact):
    scale = max(1.0, float(np.linalg.norm(np.asarray(exact).ravel())))
    return float(np.linalg.norm(np.asarray(approx).ravel()
                                - np.asarray(exact).ravel())) / scale


def random_spd(rng, d, mu_floor=0.05):
    G = rng.normal(size=(d, d)) / np.sqrt(d)
    return G @ G.T + mu_floor * np.eye(d)


def random_quadratic_problem(n=3, d=4, lam=1.0, seed=0):
    rng = np.random.default_rng(seed)
    losses = [QuadraticLoss(random_spd(rng, d), rng.normal(size=d)) for _ in range(n)]
    return Problem.build(losses, lam)


def random_logistic_problem(n=3, m=5, d=4, lam=0.5, reg=1e-3, seed=0):
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(n):
        rows = rng.normal(size=(m, d))
        labels = rng.choice([-1.0, 1.0], size=m)
        losses.append(LogisticLoss(rows, labels, reg=reg))
    return Problem.build(losses, lam)


class FiniteSumQuadratic:
    """Test-only finite-sum loss, f(z) = (1/m) sum_j (1/2 z'A_j z + b_j'z).

    Speaks the same oracle protocol as the shipped losses, so it flows
    through the generic batch path; prox and constants are exact.
    """

    def __init__(self, As, bs):
        self.As = np.asarray(As, dtype=float)
        self.bs = np.asarray(bs, dtype=float)
        self.A_mean = self.As.mean(axis=0)
        self.b_mean = self.bs.mean(axis=0)

    @property
    def d(self):
        return self.As.shape[1]

    @property
    def m(self):
        return self.As.shape[0]

    def value(self, z):
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.A_mean @ z + self.b_mean @ z)

    def grad(self, z):
        return self.A_mean @ np.asarray(z, dtype=float) + self.b_mean

    def summand_grad(self, j, z):
        return self.As[j] @ np.asarray(z, dtype=float) + self.bs[j]

    def prox(self, beta, v, tol=1e-10):
        v = np.asarray(v, dtype=float)
        M = self.A_mean + (1.0 / beta) * np.eye(self.d)
        return np.linalg.solve(M, v / beta - self.b_mean)

    def estimate_constants(self):
        mean_eigs = np.linalg.eigvalsh(self.A_mean)
        lt = max(float(np.linalg.eigvalsh(A)[-1]) for A in self.As)
        return SmoothnessInfo(mu=float(mean_eigs[0]), L=float(mean_eigs[-1]),
                              L_tilde=lt, m=self.m)


def finite_sum_problem(n=2, m=3, d=4, lam=1.0, seed=0):
    """Problem over FiniteSumQuadratic clients; constants merged by hand so
    the standard ordering checks are bypassed (identical summands can put
    L_tilde/m below mu, which the shipped losses never do)."""
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(n):
        As = np.stack([random_spd(rng, d) for _ in range(m)])
        bs = rng.normal(size=(m, d))
        losses.append(FiniteSumQuadratic(As, bs))
    infos = [l.estimate_constants() for l in losses]
    merged = SmoothnessInfo(
        mu=min(i.mu for i in infos),
        L=max(i.L for i in infos),
        L_tilde=max(i.L_tilde for i in infos),
        m=m,
    )
    return Problem(lam=lam, losses=losses, constants=merged)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
