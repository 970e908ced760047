import numpy as np
import pytest

from conftest import random_spd
from perfl.model import OracleLedger
from perfl.subsolvers import FiniteSumHandle, Subsolver, agd_solve, katyusha_solve


def _strongly_convex_quadratic(seed=0, d=5):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, d, mu_floor=0.2)
    b = rng.normal(size=d)
    evals = np.linalg.eigvalsh(A)
    z_star = np.linalg.solve(A, -b)
    return A, b, float(evals[0]), float(evals[-1]), z_star


def test_subsolver_selection_is_validated():
    Subsolver("agd")
    Subsolver("katyusha", iters=3)
    with pytest.raises(ValueError, match="kind"):
        Subsolver("sgd")
    with pytest.raises(ValueError, match="iters"):
        Subsolver("agd", iters=0)


def test_agd_converges_geometrically():
    A, b, mu, L, z_star = _strongly_convex_quadratic(1)
    z0 = np.zeros(5)
    errs = []
    for iters in (20, 40, 80):
        z = agd_solve(lambda y: A @ y + b, z0, iters, mu, L)
        errs.append(np.linalg.norm(z - z_star))
    assert errs[1] < errs[0] * 0.5
    assert errs[2] < errs[1] * 0.5
    assert errs[2] < 1e-6


def test_agd_meters_exactly_its_gradient_budget():
    A, b, mu, L, _ = _strongly_convex_quadratic(2)
    led = OracleLedger()
    agd_solve(lambda y: A @ y + b, np.zeros(5), 17, mu, L, led)
    assert led.snapshot() == (0, 17, 0, 0)


def test_agd_input_validation():
    with pytest.raises(ValueError):
        agd_solve(lambda y: y, np.zeros(2), 0, 0.1, 1.0)
    with pytest.raises(ValueError):
        agd_solve(lambda y: y, np.zeros(2), 5, 1.0, 0.5)


def _finite_sum_handle(seed=0, m=6, d=4):
    rng = np.random.default_rng(seed)
    As = np.stack([random_spd(rng, d, mu_floor=0.3) for _ in range(m)])
    bs = rng.normal(size=(m, d))
    A_mean, b_mean = As.mean(axis=0), bs.mean(axis=0)
    evals = np.linalg.eigvalsh(A_mean)
    lt = max(float(np.linalg.eigvalsh(A)[-1]) for A in As)
    def sg(j, z):
        if np.ndim(z) == 1:
            return As[j] @ z + bs[j]
        return np.einsum("nij,nj->ni", As[j], z) + bs[j]

    handle = FiniteSumHandle(
        summand_grad=sg,
        full_grad=lambda z: z @ A_mean + b_mean,  # A_mean is symmetric
        m=m, mu=float(evals[0]), L_tilde=lt,
    )
    return handle, np.linalg.solve(A_mean, -b_mean)


def test_katyusha_converges_on_a_finite_sum():
    handle, z_star = _finite_sum_handle(3)
    stream = np.random.default_rng(0)
    z = katyusha_solve(handle, np.zeros(4), 3000, stream)
    assert np.linalg.norm(z - z_star) < 1e-8


def test_katyusha_is_reproducible_per_stream_seed():
    handle, _ = _finite_sum_handle(4)
    a = katyusha_solve(handle, np.zeros(4), 200, np.random.default_rng(9))
    b = katyusha_solve(handle, np.zeros(4), 200, np.random.default_rng(9))
    c = katyusha_solve(handle, np.zeros(4), 200, np.random.default_rng(10))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_katyusha_meters_summand_pairs_and_anchor_gradients():
    handle, _ = _finite_sum_handle(5)
    led = OracleLedger()
    iters = 400
    # replay the anchor coins: draw order per iteration is j first, coin second
    stream = np.random.default_rng(21)
    katyusha_solve(handle, np.zeros(4), iters, stream, led)
    replay = np.random.default_rng(21)
    anchors = 0
    for _ in range(iters):
        replay.integers(handle.m)
        if replay.random() < 1.0 / handle.m:
            anchors += 1
    assert led.summand_grad_calls == 2 * iters
    assert led.grad_calls == 1 + anchors
    assert led.comm_rounds == 0 and led.prox_calls == 0


def test_katyusha_accepts_stacked_iterates():
    handle, z_star = _finite_sum_handle(6)
    Z0 = np.zeros((3, 4))
    out = katyusha_solve(handle, Z0, 2500, np.random.default_rng(2))
    assert out.shape == (3, 4)
    # every row solves the same subproblem, just under different index draws
    assert np.linalg.norm(out - z_star, axis=1).max() < 1e-6


def test_katyusha_rejects_empty_budget():
    handle, _ = _finite_sum_handle(7)
    with pytest.raises(ValueError):
        katyusha_solve(handle, np.zeros(4), 0, np.random.default_rng(0))
