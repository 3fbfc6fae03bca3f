import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whittle_assoc.chain import Action, ChainParams, ParameterError, kernel
from whittle_assoc.solver import (
    ConvergenceError,
    ThresholdPolicy,
    discounted_vi,
    evaluate_threshold,
    evaluate_threshold_exact,
    is_threshold_rule,
    optimal_threshold,
    rvi_optimal,
    stationary_distribution,
    submodularity_check,
    threshold_cost,
    threshold_stats,
    transition_matrix,
)

from conftest import any_chains, stable_chains


def power_stationary(params, t, iters=200_000, tol=1e-15):
    """Stationary law of the threshold chain by power iteration on kernel() rows."""
    n = t + 2
    P = np.zeros((n, n))
    for y in range(n):
        a = Action.ACTIVE if y <= t else Action.PASSIVE
        for z, q in kernel(params, y, a).support:
            P[y, z] += q
    mu = np.full(n, 1.0 / n)
    for _ in range(iters):
        nxt = mu @ P
        if np.abs(nxt - mu).max() < tol:
            return nxt
        mu = nxt
    return mu


def test_threshold_zero_closed_form():
    sol = evaluate_threshold(ChainParams(0.4, 0.5, 1.0), ThresholdPolicy(0), 0.0)
    assert sol.rho == pytest.approx(2 / 7, abs=1e-14)
    assert sol.v == pytest.approx([0.0, 10 / 7], abs=1e-13)
    mu = stationary_distribution(ChainParams(0.4, 0.5), ThresholdPolicy(0)).mu
    assert mu == pytest.approx([5 / 7, 2 / 7], abs=1e-15)


def test_never_admit_policy():
    sol = evaluate_threshold(ChainParams(0.4, 0.5, 3.0), ThresholdPolicy(-1), 2.5)
    assert sol.rho == 2.5
    assert sol.v.tolist() == [0.0]


def test_threshold_policy_validation():
    with pytest.raises(ParameterError):
        ThresholdPolicy(-2)
    assert ThresholdPolicy(3).n_states == 5
    assert ThresholdPolicy(3).action(3) == Action.ACTIVE
    assert ThresholdPolicy(3).action(4) == Action.PASSIVE


def test_transition_matrix_rows_sum_to_one():
    P = transition_matrix(ChainParams(0.4, 0.5), ThresholdPolicy(5))
    assert P.shape == (7, 7)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-15)


def test_exact_matches_rational_hand_solution():
    v, rho = evaluate_threshold_exact(ChainParams(0.4, 0.5, 1.0), 0, 0)
    assert rho == Fraction(2, 7)
    assert v == [0, Fraction(10, 7)]


@settings(max_examples=60, deadline=None)
@given(any_chains(), st.integers(-1, 80), st.floats(-10, 100))
def test_float_and_exact_evaluation_agree(params, t, lam):
    sol = evaluate_threshold(params, ThresholdPolicy(t), lam)
    v, rho = evaluate_threshold_exact(params, t, lam)
    scale = max(1.0, abs(float(rho)))
    assert sol.rho == pytest.approx(float(rho), abs=1e-8 * scale)


@settings(max_examples=60, deadline=None)
@given(stable_chains(), st.integers(-1, 60), st.floats(-5, 50))
def test_rho_equals_stationary_cost(params, t, lam):
    sol = evaluate_threshold(params, ThresholdPolicy(t), lam)
    mu = power_stationary(params, t)
    n = len(mu)
    c = params.cost_c * np.arange(n) + lam * (np.arange(n) > t)
    assert sol.rho == pytest.approx(float(mu @ c), abs=1e-9 * max(1, abs(sol.rho)))
    assert sol.residual <= 1e-9 * max(1.0, np.abs(sol.v).max())


@settings(max_examples=60, deadline=None)
@given(any_chains(), st.integers(-1, 60))
def test_stationary_distribution_matches_power_iteration(params, t):
    mu = stationary_distribution(params, ThresholdPolicy(t)).mu
    assert mu.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(mu >= 0)
    ref = power_stationary(params, t)
    assert np.abs(mu - ref).max() <= 1e-9


def test_stationary_detailed_balance_ratio():
    params = ChainParams(0.3, 0.5)
    mu = stationary_distribution(params, ThresholdPolicy(10)).mu
    q = params.up / params.down
    assert mu[1:10] / mu[:9] == pytest.approx(np.full(9, q))
    assert mu[11] / mu[10] == pytest.approx(params.up / params.r)


def test_sparse_path_matches_exact():
    params = ChainParams(0.3, 0.5, 1.0)
    sol = evaluate_threshold(params, ThresholdPolicy(1100), 7.0)
    _, rho = evaluate_threshold_exact(params, 1100, 7.0)
    assert sol.rho == pytest.approx(float(rho), rel=1e-10)
    assert len(sol.v) == 1102


def brute_threshold(params, lam, t_max):
    g = [threshold_cost(params, lam, t) for t in range(-1, t_max + 1)]
    gmin = min(g)
    return next(i for i, v in enumerate(g) if v <= gmin + 1e-12 * max(1, abs(gmin))) - 1


@settings(max_examples=40, deadline=None)
@given(stable_chains(), st.floats(-5, 60))
def test_optimal_threshold_is_argmin(params, lam):
    assert optimal_threshold(params, lam, 120) == brute_threshold(params, lam, 120)


def test_negative_tax_never_admits():
    assert optimal_threshold(ChainParams(0.4, 0.5), -1.0, 50) == -1


def test_optimal_threshold_warns_at_scan_edge():
    with pytest.warns(RuntimeWarning):
        optimal_threshold(ChainParams(0.4, 0.5), 1e6, 5)


def test_threshold_stats_shapes():
    E, R = threshold_stats(ChainParams(0.4, 0.5), 10)
    assert E.shape == R.shape == (12,)
    assert E[0] == 0 and R[0] == 1.0


@pytest.mark.parametrize("lam", [0.5, 3.0, 10.0, 40.0])
def test_rvi_agrees_with_enumeration(lam):
    params = ChainParams(0.3, 0.5, 1.0)
    sol, actions = rvi_optimal(params, lam, n_states=80)
    t = optimal_threshold(params, lam, 70)
    assert sol.policy is not None and sol.policy.t == t
    assert sol.rho == pytest.approx(threshold_cost(params, lam, t), abs=1e-8)
    # relative values on the recurrent class match policy evaluation
    ref = evaluate_threshold(params, ThresholdPolicy(t), lam)
    assert sol.v[: t + 2] == pytest.approx(ref.v, abs=1e-6)


def test_rvi_rejects_tiny_truncation():
    with pytest.raises(ParameterError):
        rvi_optimal(ChainParams(0.3, 0.5), 1.0, n_states=2)


def test_rvi_reports_non_convergence():
    with pytest.raises(ConvergenceError):
        rvi_optimal(ChainParams(0.3, 0.5), 5.0, n_states=50, max_iter=3)


def test_is_threshold_rule():
    assert is_threshold_rule([1, 1, 0, 0])
    assert is_threshold_rule([0, 0])
    assert not is_threshold_rule([1, 0, 1])


def test_vanishing_discount_limit():
    params, lam = ChainParams(0.3, 0.5, 1.0), 6.0
    sol, _ = rvi_optimal(params, lam, n_states=60, tol=1e-12)
    errs = [np.abs(discounted_vi(params, lam, b, n_states=60)[:10] - sol.v[:10]).max()
            for b in (0.99, 0.999, 0.9999)]
    # the gap closes linearly in 1 - beta
    assert errs[0] > errs[1] > errs[2]
    assert errs[0] / errs[1] > 5 and errs[1] / errs[2] > 5


def test_discounted_vi_validates_beta():
    with pytest.raises(ParameterError):
        discounted_vi(ChainParams(0.3, 0.5), 1.0, 1.0)


def test_submodularity_holds_and_negative_control_fails():
    params = ChainParams(0.4, 0.5, 2.0)
    lams = np.arange(-5, 20.5, 0.5)
    rep = submodularity_check(params, lams, range(-1, 30))
    assert rep.passed and rep.n_violations == 0
    rep = submodularity_check(params, lams, range(-1, 30),
                              g=lambda lam, t: threshold_cost(params, -lam, t))
    assert not rep.passed and rep.n_violations > 0
    l1, l2, t1, t2, margin = rep.violations[0]
    assert l1 > l2 and t1 > t2 and margin < 0


def test_submodularity_grid_must_increase():
    with pytest.raises(ParameterError):
        submodularity_check(ChainParams(0.4, 0.5), [1.0, 0.5], [0, 1])


@pytest.mark.filterwarnings("ignore:optimal threshold hit the scan edge")
@settings(max_examples=30, deadline=None)
@given(stable_chains(), st.floats(-5, 60))
def test_exact_threshold_stats_match_float(params, lam):
    from whittle_assoc.solver import optimal_threshold_exact, threshold_stats_exact
    E, R = threshold_stats(params, 40)
    Ex, Rx = threshold_stats_exact(params, 40)
    assert E == pytest.approx([float(v) for v in Ex], rel=1e-12, abs=1e-300)
    assert R == pytest.approx([float(v) for v in Rx], rel=1e-9, abs=1e-300)
    t = optimal_threshold_exact(params, lam, 200)
    g = [threshold_cost(params, lam, k) for k in range(-1, 201)]
    # the float scan can only disagree where the costs tie to rounding
    assert g[t + 1] <= min(g) + 1e-12 * max(1.0, abs(min(g)))
