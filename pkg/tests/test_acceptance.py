"""Release gate: one test per shipped guarantee, tolerances pinned.

Covers gradient correctness, the variance-reduced estimator identities,
accelerated rate envelopes, the inexact-prox limit, certification of the
communication lower bound, the penalty-sweep scaling laws, the desk-scale
stochastic comparison, bit-level reproducibility of stochastic traces, and
the sparse-format round trip. Each test also asserts its wall-clock budget
so regressions in speed fail loudly.
"""

import io
import itertools
import statistics
import time

import numpy as np
import pytest

from perfl import harness
from perfl.data import (Dataset, client_losses, normalize, parse_libsvm,
                        serialize_libsvm, split, synthetic_logistic)
from perfl.losses import make_batch
from perfl.lowerbound import (build_instance, build_nesterov_instance,
                              certify_bound, exact_optimum)
from perfl.model import (Problem, StackedPoint, bregman_F, objective_grad,
                         objective_value)
from perfl.solvers import SolverRun, solve, vr_estimator

from conftest import (fd_grad, finite_sum_problem, random_logistic_problem,
                      random_quadratic_problem, rel_err)

# Frozen outputs of the adversarial-instance construction at
# (n=4, T=25, mu=1e-4, L=1+1e-4, lam=1): the decay rate and the
# top-coordinate closure coefficient.
FROZEN_GAMMA = 0.9758028671870085
FROZEN_B = 0.008131835481965055

DESK_ROWS, DESK_DIM, DESK_CLIENTS, DESK_SEED = 500, 112, 10, 0


@pytest.fixture(scope="module")
def midsize_quadratic():
    """n=8, d=10 rotated-spectrum quadratic with mu=1e-2, L=1, lam=1."""
    losses = harness._synth_quadratic_losses(8, 10, 1e-2, 1.0, 7)
    prob = Problem.build(losses, 1.0)
    xstar, fstar = harness.exact_quadratic_optimum(prob)
    return prob, StackedPoint.zeros(8, 10), xstar, fstar


@pytest.fixture(scope="module")
def desk_problem():
    """500-row synthetic logistic stand-in, split across 10 clients the
    label-sorted way, lam = 1/m; reference objective from a long
    exact-prox accelerated run."""
    ds = normalize(synthetic_logistic(DESK_ROWS, DESK_DIM, DESK_SEED))
    sp = split(ds, DESK_CLIENTS, "heterogeneous", DESK_SEED)
    losses = client_losses(ds, sp, 1e-4)
    lam = 1.0 / sp.m
    prob = Problem.build(losses, lam)
    f_star = harness._apgd1_reference(prob, 5000)
    return prob, sp.m, lam, f_star


def test_01_gradients_match_central_differences(rng):
    t0 = time.monotonic()
    quad = random_quadratic_problem(n=3, d=4, lam=1.0, seed=2)
    logi = random_logistic_problem(n=3, m=5, d=4, lam=0.5, seed=3)
    worst = 0.0
    for prob in (quad, logi):
        n, d = prob.n, prob.d

        def f_flat(v, prob=prob, n=n, d=d):
            return objective_value(prob, StackedPoint.from_flat(v, n, d))

        for _ in range(50):
            v = rng.normal(size=n * d)
            g = objective_grad(prob, StackedPoint.from_flat(v, n, d)).flat()
            worst = max(worst, rel_err(g, fd_grad(f_flat, v)))
    for loss in (quad.losses[0], logi.losses[0]):
        for _ in range(50):
            z = rng.normal(size=4)
            worst = max(worst, rel_err(loss.grad(z), fd_grad(loss.value, z)))
    assert worst <= 1e-5
    assert time.monotonic() - t0 < 5.0


def test_02_estimator_unbiased_with_bounded_variance():
    """Exact enumeration of the (coin, per-client index) outcome space on a
    2-client, 3-summand, d=4 finite-sum quadratic: the estimator's mean is
    the full gradient, and its second moment about it stays under twice the
    smoothness-weighted divergence from the anchor."""
    t0 = time.monotonic()
    prob = finite_sum_problem(n=2, m=3, d=4, lam=1.0, seed=5)
    batch = make_batch(prob.losses)
    n, m = prob.n, prob.constants.m
    lam, lt = prob.lam, prob.constants.L_tilde
    gen = np.random.default_rng(1234)
    worst_mean, worst_ratio = 0.0, 0.0
    for trial in range(100):
        pr = (0.2, 0.5, 0.8)[trial % 3]
        X = gen.normal(size=(n, prob.d))
        W = gen.normal(size=(n, prob.d))
        wbar = W.mean(axis=0)
        GW = batch.grad(W)
        gF = objective_grad(prob, StackedPoint(X.copy())).blocks
        outcomes = [(pr, vr_estimator(batch, lam, n, pr, X, W, wbar, GW, 1, None))]
        for js in itertools.product(range(m), repeat=n):
            g = vr_estimator(batch, lam, n, pr, X, W, wbar, GW, 0, np.array(js))
            outcomes.append(((1.0 - pr) / m ** n, g))
        assert abs(sum(w for w, _ in outcomes) - 1.0) < 1e-12
        mean = sum(w * g for w, g in outcomes)
        worst_mean = max(worst_mean, float(np.abs(mean - gF).max()))
        second = sum(w * float(((g - gF) ** 2).sum()) for w, g in outcomes)
        big = max(lt / (n * (1.0 - pr)), lam / (n * pr))
        bound = 2.0 * big * bregman_F(prob, StackedPoint(W.copy()),
                                      StackedPoint(X.copy()))
        worst_ratio = max(worst_ratio, second / bound)
    assert worst_mean <= 1e-12
    assert worst_ratio <= 1.0 + 1e-9
    assert time.monotonic() - t0 < 5.0


def test_03_accelerated_traces_stay_under_rate_envelopes(midsize_quadratic):
    t0 = time.monotonic()
    prob, x0, xstar, fstar = midsize_quadratic
    mu, L, lam, n = 1e-2, 1.0, 1.0, 8
    f0 = objective_value(prob, x0)
    # k=0 right-hand side of both envelopes, in rel_subopt units
    pref = ((f0 - fstar) + mu / (2 * n) * x0.dist_sq(xstar)) / (f0 - fstar)
    for method, rate in (("apgd1", 1.0 - np.sqrt(mu / (lam + mu))),
                         ("apgd2", 1.0 - np.sqrt(mu / (L + mu)))):
        res = solve(prob, SolverRun(method, x0, 200, f_star=fstar, x_star=xstar))
        assert len(res.rows) == 201
        for row in res.rows:
            assert row.rel_subopt <= rate ** row.k * pref * (1.0 + 1e-9)
    assert time.monotonic() - t0 < 10.0


def test_04_inexact_prox_at_large_budget_matches_exact(midsize_quadratic):
    t0 = time.monotonic()
    prob, x0, xstar, fstar = midsize_quadratic
    exact = solve(prob, SolverRun("apgd1", x0, 50, f_star=fstar, x_star=xstar))
    inexact = solve(prob, SolverRun("iapgd_agd", x0, 50, f_star=fstar,
                                    x_star=xstar,
                                    method_params={"t_fixed": 10_000}))
    assert len(exact.rows) == len(inexact.rows) == 51
    gap = max(abs(a.rel_subopt - b.rel_subopt)
              for a, b in zip(exact.rows, inexact.rows))
    assert gap <= 1e-8
    assert time.monotonic() - t0 < 30.0


def test_05_adversarial_instance_certifies_lower_bound():
    t0 = time.monotonic()
    mu, L, lam = 1e-4, 1.0 + 1e-4, 1.0
    inst = build_instance(4, 25, mu, L, lam)
    assert inst.gamma == pytest.approx(FROZEN_GAMMA, rel=1e-12, abs=0.0)
    assert inst.b == pytest.approx(FROZEN_B, rel=1e-8, abs=0.0)

    # (i) the optimum decays geometrically at exactly gamma, coordinate
    # pair by coordinate pair across the two client groups
    xs, fitted = exact_optimum(inst)
    pair_norms = np.hypot(xs.blocks[0], xs.blocks[inst.n - 1])
    ratios = pair_norms[1:] / pair_norms[:-1]
    assert np.max(np.abs(ratios - inst.gamma)) / inst.gamma <= 1e-6
    assert fitted == pytest.approx(inst.gamma, rel=1e-6)

    # (ii) gamma dominates the certified decay floor
    floor = 1.0 - 10.0 * max(np.sqrt(mu / lam), np.sqrt(mu / (L - mu)))
    assert inst.gamma >= floor

    # (iii) real traces from zero respect the bound and the one-new-
    # coordinate-per-round support growth
    x0 = StackedPoint.zeros(inst.n, inst.d)
    for method in ("apgd1", "apgd2"):
        res = solve(inst.problem, SolverRun(method, x0, 40, record_iterates=True))
        report = certify_bound(inst, res.iterates,
                               [r.comm_rounds for r in res.rows])
        assert report.ok, report.summary()
        assert report.bound_violations == []
        assert report.support_violations == []
    assert time.monotonic() - t0 < 20.0


def test_06_penalty_sweep_sqrt_law_and_flat_variant():
    """Worst-case chain shared by 50 clients, d=50: rounds to shrink the
    squared distance 1e4-fold. The averaging-prox variant must be flat in
    lam (within 2x), the local-prox variant must follow the sqrt(lam) law
    and the two must swap ranking across lam = L."""
    t0 = time.monotonic()
    grid = (1e-2, 1e-1, 1.0, 10.0, 100.0)
    counts = {}
    for lam in grid:
        prob = build_nesterov_instance(50, 1e-4, 1.0, 50, lam=lam)
        xstar, fstar = harness.exact_quadratic_optimum(prob)
        x0 = StackedPoint.zeros(50, 50)
        d0 = x0.dist_sq(xstar)
        row = {}
        for method in ("apgd1", "apgd2"):
            res = solve(prob, SolverRun(method, x0, 30_000, f_star=fstar,
                                        x_star=xstar, target_rel_dist=1e-4))
            assert res.rows[-1].dist_sq <= 1e-4 * d0
            row[method] = res.rows[-1].comm_rounds
        counts[lam] = row
    flat = [counts[lam]["apgd2"] for lam in grid]
    assert max(flat) / min(flat) <= 2.0
    slope = np.polyfit(np.log10([1.0, 10.0, 100.0]),
                       np.log10([counts[lam]["apgd1"] for lam in (1.0, 10.0, 100.0)]),
                       1)[0]
    assert 0.35 <= slope <= 0.65
    assert counts[1e-2]["apgd1"] < counts[1e-2]["apgd2"]
    assert counts[100.0]["apgd1"] > counts[100.0]["apgd2"]
    assert time.monotonic() - t0 < 60.0


def test_07_accelerated_variance_reduction_beats_baseline(desk_problem):
    """Median over five seeds on the desk-scale logistic problem: the
    accelerated method needs strictly fewer rounds to rel_subopt 1e-3 with
    its tuned coins, and strictly fewer summand gradients with the uniform
    anchor coin."""
    t0 = time.monotonic()
    prob, m, lam, f_star = desk_problem
    p_acc = lam / (lam + prob.constants.L_tilde)
    x0 = StackedPoint.zeros(prob.n, prob.d)

    def run(method, seed, params):
        res = solve(prob, SolverRun(method, x0, 400_000, target_rel_subopt=1e-3,
                                    seed=seed, f_star=f_star,
                                    method_params=params))
        assert res.rows[-1].rel_subopt <= 1e-3, (method, seed)
        return res.rows[-1]

    comm_base, comm_acc, sg_base, sg_acc = [], [], [], []
    for seed in range(5):
        base = run("l2sgd_plus", seed, {"p": 1.0 / m, "rho": 1.0 / m})
        acc = run("al2sgd_plus", seed, {"p": p_acc, "rho": p_acc * (1.0 - p_acc)})
        acc_u = run("al2sgd_plus", seed, {"p": p_acc, "rho": 1.0 / m})
        comm_base.append(base.comm_rounds)
        comm_acc.append(acc.comm_rounds)
        sg_base.append(base.summand_grad_calls)
        sg_acc.append(acc_u.summand_grad_calls)
    assert statistics.median(comm_acc) < statistics.median(comm_base)
    assert statistics.median(sg_acc) < statistics.median(sg_base)
    assert time.monotonic() - t0 < 120.0


def test_08_stochastic_csv_output_is_bit_reproducible(tmp_path):
    base = "\n".join([
        f"logistic_rows={DESK_ROWS}",
        f"logistic_dim={DESK_DIM}",
        f"logistic_seed={DESK_SEED}",
        f"clients={DESK_CLIENTS}",
        "lambda=1/m",
        "mu=1e-4",
        "methods=l2sgd_plus,al2sgd_plus",
        "target_rel_subopt=1e-3",
        "max_comm=400000",
        "seed=3",
    ])
    payloads = []
    for tag in ("first", "second"):
        out = tmp_path / tag
        cfg = harness.parse_config(base + f"\nout={out}\n")
        res = harness.cmd_run(cfg)
        files = {}
        for path in list(res.csv_paths.values()) + [res.summary_path]:
            with open(path, "rb") as fh:
                files[path.split("/")[-1]] = fh.read()
        payloads.append(files)
    assert payloads[0].keys() == payloads[1].keys()
    for name in payloads[0]:
        assert payloads[0][name] == payloads[1][name], name


def test_09_sparse_round_trip_and_pure_heterogeneous_split():
    t0 = time.monotonic()
    gen = np.random.default_rng(97)
    lines = []
    for _ in range(1000):
        label = "+1" if gen.random() < 0.5 else "-1"
        k = int(gen.integers(1, 7))
        idx = np.sort(gen.choice(np.arange(1, 31), size=k, replace=False))
        lines.append(" ".join([label] + [f"{i}:{gen.normal()!r}" for i in idx]))
    text = "\n".join(lines) + "\n"

    first = parse_libsvm(io.StringIO(text))
    wire = serialize_libsvm(first)
    second = parse_libsvm(io.StringIO(wire))
    assert np.array_equal(first.labels, second.labels)
    assert first.d == second.d
    assert first.rows == second.rows
    assert serialize_libsvm(second) == wire

    toy = Dataset([[(1, float(i + 1))] for i in range(40)],
                  np.array([1.0, -1.0] * 20), 1)
    sp = split(toy, 4, "heterogeneous", seed=0)
    seen = [set(toy.labels[idx] for idx in chunk) for chunk in sp.assignment]
    assert all(len(s) == 1 for s in seen)
    assert [s.pop() for s in seen] == [-1.0, -1.0, 1.0, 1.0]
    assert time.monotonic() - t0 < 2.0
