import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import fd_grad, random_logistic_problem, random_quadratic_problem, rel_err
from perfl.model import (
    OracleLedger,
    Problem,
    SmoothnessInfo,
    StackedPoint,
    bregman_F,
    objective_grad,
    objective_value,
    psi_grad,
    psi_value,
)


def test_stacked_point_round_trip():
    x = StackedPoint(np.arange(6.0).reshape(2, 3))
    assert x.n == 2 and x.d == 3
    y = StackedPoint.from_flat(x.flat(), 2, 3)
    assert np.array_equal(x.blocks, y.blocks)
    z = StackedPoint.zeros(2, 3)
    assert x.dist_sq(z) == pytest.approx(float((x.blocks ** 2).sum()))
    s = 2.0 * (x - z) + z
    assert np.allclose(s.blocks, 2.0 * x.blocks)


def test_stacked_point_rejects_bad_shapes():
    with pytest.raises(ValueError):
        StackedPoint(np.zeros(3))
    with pytest.raises(ValueError):
        StackedPoint.from_flat(np.zeros(5), 2, 3)


def test_penalty_zero_on_consensus():
    x = StackedPoint(np.tile(np.array([1.0, -2.0, 3.0]), (4, 1)))
    assert psi_value(x) == 0.0
    assert np.allclose(psi_grad(x).blocks, 0.0)


def test_penalty_gradient_matches_finite_differences(rng):
    X = rng.normal(size=(4, 3))

    def f(flat):
        return psi_value(StackedPoint.from_flat(flat, 4, 3))

    g = psi_grad(StackedPoint(X)).flat()
    assert rel_err(fd_grad(f, X.ravel()), g) < 1e-7


@settings(deadline=None, max_examples=30)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (4,), elements=st.floats(-1e3, 1e3)))
def test_penalty_is_translation_invariant(blocks, shift):
    x = StackedPoint(blocks)
    shifted = StackedPoint(blocks + shift)
    assert psi_value(shifted) == pytest.approx(psi_value(x), rel=1e-9, abs=1e-9)


def test_objective_gradient_matches_finite_differences():
    for p in (random_quadratic_problem(seed=1), random_logistic_problem(seed=2)):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(p.n, p.d))

        def f(flat):
            return objective_value(p, StackedPoint.from_flat(flat, p.n, p.d))

        g = objective_grad(p, StackedPoint(X)).flat()
        assert rel_err(fd_grad(f, X.ravel()), g) < 1e-6


def test_objective_shape_mismatch_rejected():
    p = random_quadratic_problem(n=2, d=3)
    with pytest.raises(ValueError):
        objective_value(p, StackedPoint.zeros(3, 3))
    with pytest.raises(ValueError):
        objective_grad(p, StackedPoint.zeros(2, 4))


def test_bregman_divergence_nonnegative_and_zero_at_equal_points(rng):
    p = random_quadratic_problem(seed=3)
    for _ in range(20):
        w = StackedPoint(rng.normal(size=(p.n, p.d)))
        x = StackedPoint(rng.normal(size=(p.n, p.d)))
        assert bregman_F(p, w, x) >= -1e-12
    x = StackedPoint(rng.normal(size=(p.n, p.d)))
    assert abs(bregman_F(p, x, x)) < 1e-12


def test_smoothness_info_ordering_enforced():
    SmoothnessInfo(mu=0.1, L=1.0, L_tilde=2.0, m=3).validate()
    with pytest.raises(ValueError):
        SmoothnessInfo(mu=-0.1, L=1.0, L_tilde=1.0, m=1).validate()
    with pytest.raises(ValueError):
        SmoothnessInfo(mu=0.1, L=3.0, L_tilde=1.0, m=1).validate()
    with pytest.raises(ValueError):
        SmoothnessInfo(mu=0.5, L=1.5, L_tilde=2.0, m=5).validate()  # L_tilde/m < mu
    with pytest.raises(ValueError):
        SmoothnessInfo(mu=0.1, L=0.4, L_tilde=2.0, m=4).validate()  # L < L_tilde/m


def test_problem_build_merges_worst_case_constants():
    from perfl.losses import QuadraticLoss

    a = QuadraticLoss(np.diag([0.2, 1.0]), np.zeros(2))
    b = QuadraticLoss(np.diag([0.5, 3.0]), np.zeros(2))
    p = Problem.build([a, b], lam=1.0)
    assert p.constants.mu == pytest.approx(0.2)
    assert p.constants.L == pytest.approx(3.0)
    assert p.constants.L_tilde == pytest.approx(3.0)
    assert p.constants.m == 1


def test_problem_build_rejects_mixed_summand_counts():
    from perfl.losses import LogisticLoss, QuadraticLoss

    q = QuadraticLoss(np.eye(2) * 0.5, np.zeros(2))
    lg = LogisticLoss(np.ones((3, 2)), np.array([1.0, -1.0, 1.0]), reg=0.01)
    with pytest.raises(ValueError, match="summand count"):
        Problem.build([q, lg], lam=1.0)


def test_problem_rejects_dimension_mismatch():
    from perfl.losses import QuadraticLoss

    a = QuadraticLoss(np.eye(2), np.zeros(2))
    b = QuadraticLoss(np.eye(3), np.zeros(3))
    with pytest.raises(ValueError, match="dimension"):
        Problem(lam=1.0, losses=[a, b], constants=a.estimate_constants())


def test_ledger_counts_forward_only():
    led = OracleLedger()
    led.comm(2)
    led.grad()
    led.prox(3)
    led.summand(5)
    assert led.snapshot() == (2, 1, 3, 5)
    with pytest.raises(ValueError):
        led.comm(-1)
    assert led.snapshot() == (2, 1, 3, 5)
