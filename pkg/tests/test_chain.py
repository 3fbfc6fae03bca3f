import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whittle_assoc.chain import (
    Action,
    ChainParams,
    Kernel,
    NetworkParams,
    ParameterError,
    StabilityWarning,
    default_sigma,
    kernel,
    lyapunov_drift_check,
    normalize_rates,
)
from whittle_assoc.solver import ThresholdPolicy

from conftest import any_chains, stable_chains


def test_kernel_admit_interior():
    k = kernel(ChainParams(0.4, 0.5), 3, Action.ACTIVE).as_dict()
    assert k == pytest.approx({4: 0.2, 2: 0.3, 3: 0.5})


def test_kernel_admit_at_zero():
    k = kernel(ChainParams(0.4, 0.5), 0, Action.ACTIVE).as_dict()
    assert k == pytest.approx({1: 0.2, 0: 0.8})


def test_kernel_reject():
    assert kernel(ChainParams(0.4, 0.5), 2, Action.PASSIVE).as_dict() == pytest.approx(
        {1: 0.5, 2: 0.5})
    assert kernel(ChainParams(0.4, 0.5), 0, Action.PASSIVE).as_dict() == {0: 1.0}


def test_kernel_rejects_negative_state():
    with pytest.raises(ParameterError):
        kernel(ChainParams(0.4, 0.5), -1, Action.ACTIVE)


@given(any_chains(), st.integers(0, 50), st.sampled_from(list(Action)))
def test_kernel_is_a_distribution(params, x, a):
    k = kernel(params, x, a)
    assert len(k.support) <= 3
    assert all(q >= 0 for _, q in k.support)
    assert math.isclose(sum(q for _, q in k.support), 1.0, abs_tol=1e-12)
    assert all(abs(z - x) <= 1 and z >= 0 for z, _ in k.support)


@pytest.mark.parametrize("x,a", [(0, Action.ACTIVE), (3, Action.ACTIVE), (3, Action.PASSIVE)])
def test_kernel_matches_monte_carlo(x, a):
    # X' = (X + zeta*u - gamma)^+ sampled directly
    p, r, n = 0.4, 0.5, 1_000_000
    rng = np.random.default_rng(7)
    zeta = rng.random(n) < p
    gamma = rng.random(n) < r
    nxt = np.maximum(x + zeta * int(a) - gamma, 0)
    for z, q in kernel(ChainParams(p, r), x, a).support:
        freq = np.mean(nxt == z)
        se = math.sqrt(q * (1 - q) / n)
        assert abs(freq - q) <= 3 * se + 1e-12


@pytest.mark.parametrize("p,r,c", [(1.0, 0.5, 1), (-0.1, 0.5, 1), (0.4, 0.0, 1), (0.4, 1.0, 1),
                                   (0.4, 0.5, -1), (0.4, 0.5, math.inf)])
def test_chain_params_validation(p, r, c):
    with pytest.raises(ParameterError):
        ChainParams(p, r, c)


def test_stability():
    assert ChainParams(0.3, 0.5).is_stable()
    assert not ChainParams(0.4, 0.5).is_stable()  # 0.667 > 0.5
    assert ChainParams(0.4, 0.7).is_stable()


def test_kernel_support_validation():
    with pytest.raises(ParameterError):
        Kernel(((0, 0.5), (1, 0.4)))
    with pytest.raises(ParameterError):
        Kernel(((0, 1.1), (1, -0.1)))


def test_normalize_rates():
    r = normalize_rates([10.0, 5.0, 2.0], delta=0.1)
    assert r == pytest.approx([10 / 10.1, 5 / 10.1, 2 / 10.1])
    assert all(0 < v < 1 for v in r)
    with pytest.raises(ParameterError):
        normalize_rates([1.0, 2.0], delta=0)
    with pytest.raises(ParameterError):
        normalize_rates([1.0, 0.0], delta=0.1)


def test_network_sorts_by_rate_and_keeps_labels():
    net = NetworkParams.from_vectors(0.1, [0.3, 0.5, 0.3, 0.4], [1, 2, 3, 4])
    assert net.rates == [0.5, 0.4, 0.3, 0.3]
    assert net.labels == (1, 3, 0, 2)
    assert net.costs == [2, 4, 1, 3]


def test_network_warns_when_unstable():
    with pytest.warns(StabilityWarning):
        NetworkParams.from_vectors(0.9, [0.5, 0.4], [1, 1])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        NetworkParams.from_vectors(0.1, [0.5, 0.4], [1, 1])


def test_network_length_mismatch():
    with pytest.raises(ParameterError):
        NetworkParams.from_vectors(0.4, [0.5, 0.4], [1])


def test_lyapunov_hypothesis_violated():
    # r(1-p)/p = 0.45*0.6/0.4 < 1
    rep = lyapunov_drift_check(ChainParams(0.4, 0.45), 0.1, ThresholdPolicy(10), 20)
    assert rep.status == "hypothesis violated"
    assert not rep.passed


def test_lyapunov_sigma_outside_range():
    params = ChainParams(0.3, 0.5)  # bound 7/6
    rep = lyapunov_drift_check(params, math.log(7 / 6) + 0.01, ThresholdPolicy(10), 20)
    assert rep.status == "hypothesis violated"


@settings(max_examples=50)
@given(st.floats(0.05, 0.4), st.floats(0.5, 0.95), st.floats(0.05, 0.95), st.integers(-1, 30))
def test_lyapunov_drift_negative_under_hypothesis(p, r, frac, t):
    params = ChainParams(p, r)
    if r * (1 - p) / p <= 1.01:  # keep sigma clear of rounding
        return
    rep = lyapunov_drift_check(params, default_sigma(params, frac), ThresholdPolicy(t), 40)
    assert rep.status == "ok"
    assert rep.passed and rep.delta > 0
