import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scpo_lab import checks
from scpo_lab.config import RunConfig
from scpo_lab.errors import DomainError, SolverError
from scpo_lab.trust_region import (
    FEASIBLE,
    RECOVERY,
    CGInfo,
    Evaluation,
    TrustRegionProblem,
    conjugate_gradient,
    line_search,
    solve_step,
)


def diag_problem(g, b, c, delta, diag):
    diag = np.asarray(diag, float)
    return TrustRegionProblem(np.asarray(g, float), None if b is None else np.asarray(b, float), c, delta,
                              lambda v: diag * v, cg_iters=50, cg_tol=1e-13)


def test_cg_small_example():
    x = conjugate_gradient(lambda v: 2.0 * v, np.array([2.0, 4.0]))
    np.testing.assert_allclose(x, [1.0, 2.0])


def test_cg_zero_rhs():
    info = []
    x = conjugate_gradient(lambda v: 2.0 * v, np.zeros(3), info=info)
    np.testing.assert_array_equal(x, 0.0)
    assert info[0] == CGInfo(0, 0.0, True)


def test_cg_random_spd_systems():
    res = checks.check_cg(systems=8)
    assert res.ok, res.failures


def test_cg_reports_unconverged_runs():
    rng = np.random.default_rng(0)
    a = checks.random_spd(rng, 50, cond=1e4)
    info = []
    conjugate_gradient(lambda v: a @ v, rng.standard_normal(50), max_iters=3, info=info)
    assert info[0].iterations == 3 and not info[0].converged and info[0].residual > 0


def test_cg_breakdown_raises_with_diagnostics():
    with pytest.raises(SolverError) as exc:
        conjugate_gradient(lambda v: -v, np.ones(3))
    assert exc.value.diagnostics["pHp"] < 0
    assert exc.value.diagnostics["iteration"] == 0


def test_unconstrained_step_is_trpo_step():
    g, diag, delta = np.array([1.0, -2.0, 0.5]), np.array([1.0, 2.0, 4.0]), 0.02
    step = solve_step(diag_problem(g, np.zeros(3), 0.0, delta, diag))
    q = float(g @ (g / diag))
    np.testing.assert_allclose(step.direction, math.sqrt(2 * delta / q) * g / diag, rtol=1e-12)
    assert step.mode == FEASIBLE
    assert step.predicted_kl == pytest.approx(delta)
    no_b = solve_step(diag_problem(g, None, 0.0, delta, diag))
    np.testing.assert_array_equal(no_b.direction, step.direction)


def test_recovery_step_when_constraint_is_unreachable():
    g, b, diag, delta = np.array([1.0, 0.5]), np.array([0.3, -0.2]), np.array([1.0, 3.0]), 1e-4
    step = solve_step(diag_problem(g, b, 5.0, delta, diag))
    assert step.mode == RECOVERY
    s = float(b @ (b / diag))
    np.testing.assert_allclose(step.direction, -math.sqrt(2 * delta / s) * b / diag, rtol=1e-12)
    assert b @ step.direction < 0
    cos = (step.direction @ (b / diag)) / (np.linalg.norm(step.direction) * np.linalg.norm(b / diag))
    assert cos == pytest.approx(-1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_step_respects_trust_region_and_linear_constraint(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(2, 8))
    diag = np.exp(rng.uniform(-1, 1, dim))
    g, b = rng.standard_normal(dim), rng.standard_normal(dim)
    delta = float(rng.uniform(0.001, 0.05))
    c = float(rng.normal(0, 0.3))
    step = solve_step(diag_problem(g, b, c, delta, diag))
    x = step.direction
    assert 0.5 * x @ (diag * x) <= delta * (1 + 1e-9)
    if step.mode == FEASIBLE:
        assert c + b @ x <= 1e-9 * max(1.0, abs(c))
    else:
        assert b @ x < 0


def test_dual_matches_grid_oracle():
    res = checks.check_dual(instances=50)
    assert res.ok, res.failures


def test_solver_error_for_indefinite_operator():
    prob = TrustRegionProblem(np.ones(2), np.ones(2), 0.1, 0.01, lambda v: -v)
    with pytest.raises(SolverError):
        solve_step(prob)


def test_problem_rejects_non_positive_radius():
    with pytest.raises(DomainError):
        TrustRegionProblem(np.ones(2), None, 0.0, 0.0, lambda v: v)


# -- line search ----------------------------------------------------------------


def quadratic_evaluator(kl_scale=1.0, reward=None, cost=None):
    reward = reward or (lambda th: float(th.sum()))
    cost = cost or (lambda th: 0.0)
    return lambda th: Evaluation(kl=kl_scale * float(th @ th), reward_surrogate=reward(th), cost_surrogate=cost(th))


def test_zero_direction_accepted_immediately():
    res = line_search(np.zeros(2), np.zeros(2), quadratic_evaluator(), delta=0.01, c=0.0)
    assert res.accepted and res.backtracks == 0
    np.testing.assert_array_equal(res.theta, 0.0)


def test_kl_violation_backtracks():
    d = np.array([0.2, 0.0])  # kl 0.04 at j = 0, 0.0256 at j = 1, 0.0164 at j = 2
    res = line_search(np.zeros(2), d, quadratic_evaluator(), delta=0.02)
    assert res.accepted and res.backtracks == 2
    assert [r[1] for r in res.rejections] == ["kl", "kl"]
    np.testing.assert_allclose(res.theta, 0.8**2 * d)


def test_cost_gate_uses_slack():
    d = np.array([0.1, 0.0])
    ev = quadratic_evaluator(cost=lambda th: 10.0 * th[0])  # cost rises by 1.0 at j = 0
    tight = line_search(np.zeros(2), d, ev, delta=1.0, c=0.0, max_backtracks=5)
    assert not tight.accepted and all(r[1] == "cost" for r in tight.rejections)
    np.testing.assert_array_equal(tight.theta, 0.0)
    slack = line_search(np.zeros(2), d, ev, delta=1.0, c=-0.7)
    assert slack.accepted and 10.0 * slack.theta[0] <= 0.7
    # c = None disables the cost gate (unconstrained baselines)
    free = line_search(np.zeros(2), d, ev, delta=1.0, c=None)
    assert free.backtracks == 0


def test_reward_gate_and_recovery_bypass():
    d = np.array([-0.1, 0.0])
    ev = quadratic_evaluator()
    res = line_search(np.zeros(2), d, ev, delta=1.0, c=0.0, max_backtracks=10)
    assert not res.accepted and len(res.rejections) == 10
    assert res.backtracks is None and res.evaluation is None
    rec = line_search(np.zeros(2), d, ev, delta=1.0, c=0.0, infeasible=True)
    assert rec.accepted and rec.backtracks == 0


def test_non_finite_candidates_are_skipped():
    def ev(th):
        kl = math.inf if th[0] > 0.05 else float(th @ th)
        return Evaluation(kl, float(th.sum()), 0.0)

    res = line_search(np.zeros(2), np.array([0.1, 0.0]), ev, delta=1.0)
    assert res.accepted and res.rejections[0] == (0, "non-finite")


def test_bad_backtracking_coefficient():
    with pytest.raises(DomainError):
        line_search(np.zeros(1), np.zeros(1), quadratic_evaluator(), delta=0.1, xi=1.0)


def test_line_search_defaults():
    cfg = RunConfig()
    assert (cfg.backtrack_coef, cfg.backtrack_iters, cfg.delta) == (0.8, 100, 0.02)
