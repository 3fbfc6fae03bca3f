import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whittle_assoc.chain import ChainParams, ParameterError
from whittle_assoc.index import build_table
from whittle_assoc.policies import BLOCKED, Policy, PolicyKind, parse_policy
from whittle_assoc.sim import (
    ArrivalSpec,
    DrawStreams,
    QueueState,
    SimConfig,
    SlotDraws,
    run,
    run_replicates,
    step,
    whittle_tables,
    write_departures_csv,
    write_trace_csv,
)

LOAD = parse_policy("load")


def cfg(**kw):
    base = dict(rates=(0.5, 0.4), costs=(1.0, 2.0), policy=LOAD, horizon=2000,
                arrival=ArrivalSpec.fixed(0.4))
    base.update(kw)
    return SimConfig(**base)


def test_stubbed_slots_follow_queue_recursion():
    c = cfg(costs=(2.0, 3.0), horizon=3)
    state = QueueState.idle(2)
    occ, costs = [], []
    for n, a in enumerate([1, 0, 1]):
        occ.append(state.occupancy)
        state, rec = step(state, n, c, SlotDraws(bool(a), (False, False), 0.0))
        costs.append(rec.cost)
    occ.append(state.occupancy)
    assert occ == [[0, 0], [1, 0], [1, 0], [1, 1]]
    assert np.mean(costs) == pytest.approx(4 / 3)


def test_arrival_to_full_network_is_blocked():
    from collections import deque
    c = cfg(buffer=1)
    state = QueueState([deque([0]), deque([0])])
    new, rec = step(state, 5, c, SlotDraws(True, (False, False), 0.3))
    assert rec.chosen == BLOCKED
    assert new.occupancy == [1, 1]


def test_departure_records_inclusive_delay():
    from collections import deque
    state = QueueState([deque([2, 4]), deque()])
    new, rec = step(state, 7, cfg(), SlotDraws(False, (True, False), 0.0))
    assert rec.delays == ((0, 2, 6),)
    assert new.occupancy == [1, 0]


def test_same_slot_service_depends_on_rule():
    draws = SlotDraws(True, (True, True), 0.0)
    _, post = step(QueueState.idle(2), 0, cfg(), draws)
    _, pre = step(QueueState.idle(2), 0, cfg(departure_rule="pre"), draws)
    assert post.delays == ((0, 0, 1),)
    assert pre.delays == ()


def test_no_arrivals_drains_to_zero():
    c = replace(cfg(rates=(0.3,), costs=(1.0,)), arrival=ArrivalSpec.fixed(0.0))
    rng = np.random.default_rng(11)
    from collections import deque
    for _ in range(1000):
        state = QueueState([deque([0] * 5)])
        prev, n = 5, 0
        while state.occupancy[0] > 0:
            state, _ = step(state, n, c, SlotDraws(False, (bool(rng.random() < 0.3),), 0.0))
            assert state.occupancy[0] <= prev
            prev, n = state.occupancy[0], n + 1
            assert n < 10_000


def test_zero_arrival_run():
    res = run(cfg(arrival=ArrivalSpec.fixed(0.0)))
    assert res.avg_cost == 0.0 and res.arrivals == 0
    assert res.zero_arrivals and res.blocking_prob == 0.0
    assert np.isnan(res.avg_delay)


def test_rerun_is_bit_identical():
    c = cfg(policy=parse_policy("random"), horizon=5000, buffer=3)
    a, b = run(c), run(c)
    assert a.avg_cost == b.avg_cost and a.avg_delay == b.avg_delay
    assert np.array_equal(a.running_avg, b.running_avg)
    assert a.blocked == b.blocked and a.departures == b.departures


def test_single_mbs_stationary_mean():
    # admit-always birth-death chain: mean = q / (1 - q) with q = p(1-r)/((1-p)r)
    p, r, T = 0.3, 0.5, 200_000
    q = p * (1 - r) / ((1 - p) * r)
    res = run(SimConfig((r,), (1.0,), LOAD, T, ArrivalSpec.fixed(p), report_window=(0, T), seed=4))
    assert res.avg_cost == pytest.approx(q / (1 - q), rel=0.05)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(list(PolicyKind)), st.integers(1, 5), st.one_of(st.none(), st.integers(1, 4)),
       st.floats(0.05, 0.95), st.integers(0, 2**32))
def test_conservation_and_buffer_bound(kind, K, buffer, p, seed):
    rates = tuple(np.linspace(0.7, 0.2, K))
    c = SimConfig(rates, tuple(range(1, K + 1)), Policy(kind), 3000, ArrivalSpec.fixed(p),
                  buffer=buffer, seed=seed)
    res = run(c, trace=True)
    assert res.conserves()
    occ = res.trace["occupancy"]
    assert occ.min() >= 0
    if buffer is not None:
        assert occ.max() <= buffer
    assert 0.0 <= res.blocking_prob <= 1.0
    if res.departures:
        assert res.avg_delay >= 1.0


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(list(PolicyKind)), st.integers(1, 4), st.one_of(st.none(), st.integers(1, 3)),
       st.booleans(), st.sampled_from(["post", "pre"]), st.integers(0, 1000))
def test_python_and_compiled_engines_agree(kind, K, buffer, dynamic, rule, seed):
    arrival = ArrivalSpec.uniform(0.01, 0.99) if dynamic else ArrivalSpec.fixed(0.6)
    c = SimConfig(tuple(np.linspace(0.6, 0.3, K)), tuple(np.linspace(3, 1, K)), Policy(kind), 400,
                  arrival, buffer=buffer, seed=seed, departure_rule=rule)
    a = run(c, trace=True)
    b = run(c, trace=True, engine="python")
    assert a.avg_cost == b.avg_cost
    assert a.avg_delay == b.avg_delay or (np.isnan(a.avg_delay) and np.isnan(b.avg_delay))
    assert (a.arrivals, a.blocked, a.departures) == (b.arrivals, b.blocked, b.departures)
    for key in ("chosen", "occupancy", "cost", "departures"):
        assert np.array_equal(a.trace[key], b.trace[key])


def test_departures_are_fifo():
    res = run(cfg(horizon=5000, buffer=5), trace=True)
    dep = res.trace["departures"]
    for i in range(2):
        arrivals = dep[dep[:, 0] == i, 1]
        assert np.all(np.diff(arrivals) > 0)


def test_crn_shares_arrivals_across_policies():
    c = cfg(horizon=3000, buffer=4)
    a = run(replace(c, policy=parse_policy("snr")), trace=True)
    b = run(replace(c, policy=parse_policy("random")), trace=True)
    assert np.array_equal(a.trace["arrival"], b.trace["arrival"])
    a2 = run(replace(c, policy=parse_policy("snr")), trace=True, crn=False)
    b2 = run(replace(c, policy=parse_policy("random")), trace=True, crn=False)
    assert not np.array_equal(a2.trace["arrival"], b2.trace["arrival"])


def test_duplicate_policy_under_crn_is_identical():
    s = run_replicates(cfg(), 3, [LOAD, LOAD], crn=True)
    assert list(s.results) == ["load", "load'"]
    assert np.array_equal(s.values("load"), s.values("load'"))


def test_single_replicate_is_a_run():
    c = cfg(seed=9)
    s = run_replicates(c, 1, [LOAD])
    assert s.results["load"][0].avg_cost == run(c).avg_cost
    assert s.seeds == [9]


def test_crn_reduces_variance_of_differences():
    c = SimConfig((0.55, 0.52, 0.50, 0.48, 0.45), (25, 35, 45, 60, 95), parse_policy("whittle"),
                  4000, ArrivalSpec.fixed(0.4))
    pols = [parse_policy("whittle"), LOAD]
    paired = run_replicates(c, 12, pols, crn=True)
    indep = run_replicates(c, 12, pols, crn=False)
    d_paired = paired.values("whittle") - paired.values("load")
    d_indep = indep.values("whittle") - indep.values("load")
    assert d_paired.std(ddof=1) <= d_indep.std(ddof=1)


def test_replicate_statistics():
    s = run_replicates(cfg(), 5, [LOAD])
    mean, std, half = s.stats["load"]["avg_cost"]
    vals = s.values("load")
    assert mean == pytest.approx(vals.mean())
    assert std == pytest.approx(vals.std(ddof=1))
    assert half > 0


def test_dynamic_arrivals_have_mean_half():
    d = DrawStreams(0, (0.5,), 200_000, ArrivalSpec.uniform(0.01, 0.99))
    assert d.arrive.mean() == pytest.approx(0.5, abs=0.005)


def test_whittle_tables_scale_with_cost():
    c = cfg(rates=(0.5, 0.5), costs=(1.0, 3.0), buffer=6)
    tab = whittle_tables(c)
    assert tab.shape == (2, 8)
    assert tab[1] == pytest.approx(3 * tab[0])
    assert tab[0] == pytest.approx(build_table(ChainParams(0.4, 0.5, 1.0), 8).values)


def test_config_validation():
    with pytest.raises(ParameterError):
        cfg(rates=(0.5,))
    with pytest.raises(ParameterError):
        cfg(buffer=0)
    with pytest.raises(ParameterError):
        cfg(report_window=(10, 5000))
    with pytest.raises(ParameterError):
        ArrivalSpec.uniform(0.5, 0.2)
    with pytest.raises(ParameterError):
        ArrivalSpec.fixed(1.0)
    with pytest.raises(ParameterError):
        run(cfg(), engine="gpu")


def test_trace_and_departure_csv(tmp_path):
    c = cfg(horizon=50, buffer=2)
    res = run(c, trace=True)
    write_trace_csv(tmp_path / "t.csv", c, res)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["slot", "arrival", "chosen_mbs", "blocked", "occ_1", "occ_2", "cost"]
    assert len(rows) == 51
    assert float(rows[1][-1]) == 0.0
    write_departures_csv(tmp_path / "d.csv", res)
    drows = list(csv.DictReader(open(tmp_path / "d.csv")))
    assert len(drows) == res.departures
    assert all(int(r["delay_inclusive"]) == int(r["delay_exclusive"]) + 1 for r in drows)
    with pytest.raises(ParameterError):
        write_trace_csv(tmp_path / "x.csv", c, run(c))
