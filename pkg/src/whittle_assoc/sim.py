"""Seeded slotted-time simulation of the K-mBS network.

Within slot ``n``:

1. the cost sum_i C_i X_n^i is recorded from the beginning-of-slot queues;
2. an arrival occurs with probability p_n;
3. if it does, the policy picks a non-full mBS (or the user is blocked) and
   the user joins the back of that queue with timestamp n;
4. every mBS holding at least one user after step 3 loses its head-of-line
   user with probability r_i; the departing user's delay is
   n - arrival_slot + 1 slots.

This makes X_{n+1} = (X_n + zeta*u - gamma)^+ hold exactly, including the
empty-queue case that the single-chain transition kernel uses.

Random draws come from Philox streams keyed by (seed, purpose, mBS), drawn
for the whole horizon up front, so every policy run on the same seed sees
the same arrivals and the same departure coins when common random numbers
are on.
"""
from __future__ import annotations

import csv
import functools
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numba
import numpy as np
from scipy import stats

from .chain import ChainParams, NetworkParams, ParameterError
from .index import IndexConfig, build_table
from .policies import BLOCKED, Policy, PolicyKind, TIE_REL, select

ARRIVAL, ARRIVAL_P, DEPARTURE, POLICY = 0, 1, 2, 3
DEFAULT_TABLE_STATES = 200


@dataclass(frozen=True)
class ArrivalSpec:
    """Fixed per-slot arrival probability, or a fresh Uniform(lo, hi) draw every slot."""

    p: float | None = None
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.p is not None:
            if not 0.0 <= self.p < 1.0:
                raise ParameterError(f"arrival probability {self.p} not in [0, 1)")
        elif self.lo is None or self.hi is None or not 0.0 <= self.lo < self.hi <= 1.0:
            raise ParameterError(f"need 0 <= lo < hi <= 1, got ({self.lo}, {self.hi})")

    @classmethod
    def fixed(cls, p):
        return cls(p=float(p))

    @classmethod
    def uniform(cls, lo, hi):
        return cls(lo=float(lo), hi=float(hi))

    @property
    def dynamic(self) -> bool:
        return self.p is None

    @property
    def mean_p(self) -> float:
        # i.i.d. p_n makes the arrival indicators i.i.d. Bernoulli(E[p_n])
        return self.p if self.p is not None else 0.5 * (self.lo + self.hi)

    def describe(self) -> str:
        return f"{self.p}" if self.p is not None else f"uniform {self.lo} {self.hi}"


@dataclass(frozen=True)
class SimConfig:
    rates: tuple
    costs: tuple
    policy: Policy
    horizon: int
    arrival: ArrivalSpec
    buffer: int | None = None  # None = unlimited
    seed: int = 0
    report_window: tuple | None = None  # [start, end); default: second half
    index_states: int | None = None
    index_config: IndexConfig = IndexConfig()
    # "post": an mBS that holds a user after this slot's arrival may serve it;
    # "pre": only mBSs occupied at the start of the slot may serve
    departure_rule: str = "post"

    def __post_init__(self):
        if len(self.rates) != len(self.costs) or len(self.rates) == 0:
            raise ParameterError("rates and costs must be non-empty and of equal length")
        if any(not 0 < r < 1 for r in self.rates):
            raise ParameterError("rates must lie in (0, 1)")
        if any(not c >= 0 for c in self.costs):
            raise ParameterError("costs must be >= 0")
        if self.horizon < 1:
            raise ParameterError("horizon must be >= 1")
        if self.buffer is not None and self.buffer < 1:
            raise ParameterError("buffer must be a positive integer or None")
        if self.departure_rule not in ("post", "pre"):
            raise ParameterError(f"departure_rule must be post|pre, got {self.departure_rule!r}")
        w = self.window
        if not 0 <= w[0] < w[1] <= self.horizon:
            raise ParameterError(f"report window {w} not inside [0, {self.horizon})")

    @property
    def K(self) -> int:
        return len(self.rates)

    @property
    def window(self) -> tuple:
        if self.report_window is None:
            return (self.horizon // 2, self.horizon)
        return tuple(int(v) for v in self.report_window)

    @property
    def table_states(self) -> int:
        if self.index_states is not None:
            return self.index_states
        return self.buffer + 2 if self.buffer is not None else DEFAULT_TABLE_STATES

    def network(self) -> NetworkParams:
        return NetworkParams.from_vectors(self.arrival.mean_p, self.rates, self.costs,
                                          warn_unstable=False)


@dataclass(frozen=True)
class SlotDraws:
    arrival: bool
    departures: tuple
    u: float


class DrawStreams:
    """All random input of one run, drawn up front from keyed Philox streams."""

    def __init__(self, seed: int, rates: Sequence[float], horizon: int, arrival: ArrivalSpec,
                 salt: int = 0):
        K, T = len(rates), horizon

        def gen(purpose, sub=0):
            ss = np.random.SeedSequence(seed, spawn_key=(purpose, sub, salt))
            return np.random.Generator(np.random.Philox(ss))

        ua = gen(ARRIVAL).random(T)
        if arrival.dynamic:
            p_n = arrival.lo + (arrival.hi - arrival.lo) * gen(ARRIVAL_P).random(T)
            self.arrive = ua < p_n
        else:
            self.arrive = ua < arrival.p
        self.depart = np.empty((K, T), dtype=np.bool_)
        for i, r in enumerate(rates):
            self.depart[i] = gen(DEPARTURE, i).random(T) < r
        self.u = gen(POLICY).random(T)

    def draws(self, n: int) -> SlotDraws:
        return SlotDraws(bool(self.arrive[n]), tuple(bool(d) for d in self.depart[:, n]),
                         float(self.u[n]))


@dataclass
class QueueState:
    queues: list  # one deque of arrival slots per mBS, head = oldest

    @classmethod
    def idle(cls, K):
        return cls([deque() for _ in range(K)])

    @property
    def occupancy(self) -> list:
        return [len(q) for q in self.queues]


@dataclass(frozen=True)
class SlotRecord:
    slot: int
    arrival: bool
    chosen: int  # mBS position, BLOCKED, or None when no arrival
    occupancy: tuple  # beginning of slot
    cost: float
    delays: tuple  # (mbs, arrival_slot, delay_inclusive) for departures this slot


def step(state: QueueState, n: int, cfg: SimConfig, draws: SlotDraws, tables=None):
    """Advance one slot.  Returns the new state and the slot's record."""
    occ = state.occupancy
    cost = float(sum(c * x for c, x in zip(cfg.costs, occ)))
    queues = [deque(q) for q in state.queues]
    chosen = None
    if draws.arrival:
        cands = [i for i in range(cfg.K) if cfg.buffer is None or occ[i] < cfg.buffer]
        chosen = select(cfg.policy, occ, cfg.rates, tables, cands, draws.u).chosen
        if chosen != BLOCKED:
            queues[chosen].append(n)
    delays = []
    pre = cfg.departure_rule == "pre"
    for i, q in enumerate(queues):
        if draws.departures[i] and q and (not pre or occ[i] > 0):
            a = q.popleft()
            delays.append((i, a, n - a + 1))
    return QueueState(queues), SlotRecord(n, draws.arrival, chosen, tuple(occ), cost, tuple(delays))


@numba.njit(cache=True)
def _select_kernel(kind, mixed_w, sign, occ, rates, tables, buffer, u):
    K = occ.shape[0]
    m = 0
    for i in range(K):
        if buffer <= 0 or occ[i] < buffer:
            m += 1
    if m == 0:
        return -1
    ncol = tables.shape[1]
    if kind == 5:  # random
        k = min(int(u * m), m - 1)
        for i in range(K):
            if buffer <= 0 or occ[i] < buffer:
                if k == 0:
                    return i
                k -= 1
    if kind == 0 or kind == 2:  # whittle / snr: strict improvement keeps smallest id
        best = -1
        bs = np.inf
        for i in range(K):
            if buffer > 0 and occ[i] >= buffer:
                continue
            if kind == 0:
                s = sign * tables[i, occ[i]] if occ[i] < ncol else np.inf
            else:
                s = -rates[i]
            if best < 0 or s < bs:
                best = i
                bs = s
        return best
    scores = np.empty(K)
    best = -np.inf
    for i in range(K):
        if buffer > 0 and occ[i] >= buffer:
            scores[i] = -np.inf
            continue
        if kind == 1:
            s = -float(occ[i])
        elif kind == 3:
            s = rates[i] / (occ[i] + 1)
        else:
            s = mixed_w * rates[i] + rates[i] / (occ[i] + 1)
        scores[i] = s
        best = max(best, s)
    tol = TIE_REL * max(abs(best), 1.0)
    nt = 0
    for i in range(K):
        if abs(scores[i] - best) <= tol:
            nt += 1
    k = min(int(u * nt), nt - 1)
    for i in range(K):
        if abs(scores[i] - best) <= tol:
            if k == 0:
                return i
            k -= 1
    return -1



@numba.njit(cache=True)
def _run_kernel(kind, mixed_w, sign, arrive, depart, u, rates, costs, tables, buffer, w0, w1,
                want_trace, pre_rule):
    K, T = depart.shape
    cap = buffer if buffer > 0 else T + 1
    ring = np.empty((K, cap), dtype=np.int64)
    head = np.zeros(K, dtype=np.int64)
    occ = np.zeros(K, dtype=np.int64)
    window_cost = np.empty(w1 - w0)
    nt = T if want_trace else 0
    tr_chosen = np.full(nt, -2, dtype=np.int64)
    tr_occ = np.zeros((nt, K), dtype=np.int64)
    tr_cost = np.zeros(nt)
    dep_log = np.zeros((T if want_trace else 0, 3), dtype=np.int64)
    n_log = 0
    occ_sum = np.zeros(K)
    occ_max = np.zeros(K, dtype=np.int64)
    delay_sum = 0.0
    n_dep = 0
    blocked = 0
    arrivals = 0
    occ0 = np.zeros(K, dtype=np.int64)
    for n in range(T):
        cost = 0.0
        for i in range(K):
            occ0[i] = occ[i]
            cost += costs[i] * occ[i]
            occ_sum[i] += occ[i]
            if occ[i] > occ_max[i]:
                occ_max[i] = occ[i]
        if w0 <= n < w1:
            window_cost[n - w0] = cost
        if want_trace:
            tr_cost[n] = cost
            for i in range(K):
                tr_occ[n, i] = occ[i]
        if arrive[n]:
            arrivals += 1
            ch = _select_kernel(kind, mixed_w, sign, occ, rates, tables, buffer, u[n])
            if ch < 0:
                blocked += 1
            else:
                ring[ch, (head[ch] + occ[ch]) % cap] = n
                occ[ch] += 1
            if want_trace:
                tr_chosen[n] = ch
        for i in range(K):
            if depart[i, n] and occ[i] > 0 and (not pre_rule or occ0[i] > 0):
                a = ring[i, head[i]]
                head[i] = (head[i] + 1) % cap
                occ[i] -= 1
                delay_sum += n - a + 1
                n_dep += 1
                if want_trace:
                    dep_log[n_log, 0] = i
                    dep_log[n_log, 1] = a
                    dep_log[n_log, 2] = n
                    n_log += 1
    return (window_cost, delay_sum, n_dep, blocked, arrivals, occ, occ_sum, occ_max,
            tr_chosen, tr_occ, tr_cost, dep_log[:n_log])


@dataclass
class SimResult:
    avg_cost: float
    running_avg: np.ndarray
    avg_delay: float  # inclusive convention, slots
    blocking_prob: float
    arrivals: int
    admitted: int
    blocked: int
    departures: int
    final_occupancy: np.ndarray
    mean_occupancy: np.ndarray
    max_occupancy: np.ndarray
    zero_arrivals: bool
    seed: int
    policy: str
    trace: dict | None = None

    @property
    def avg_delay_exclusive(self) -> float:
        return self.avg_delay - 1.0 if self.departures else math.nan

    def conserves(self) -> bool:
        return (self.admitted == self.departures + int(self.final_occupancy.sum())
                and self.arrivals == self.admitted + self.blocked)


@functools.lru_cache(maxsize=512)
def _unit_table(p, r, n_states, cfg):
    # the index is linear in the holding cost, so one table per (p, r) serves every C
    return build_table(ChainParams(p, r, 1.0), n_states, 1, cfg).values


def whittle_tables(cfg: SimConfig) -> np.ndarray:
    """K x n array of index values for the decoupled chains of ``cfg``."""
    p = cfg.arrival.mean_p
    n = cfg.table_states
    out = np.empty((cfg.K, n))
    for i, (r, c) in enumerate(zip(cfg.rates, cfg.costs)):
        out[i] = c * _unit_table(float(p), float(r), n, cfg.index_config)
    return out


def _salt(policy: Policy, crn: bool) -> int:
    return 0 if crn else 1 + int(policy.kind)


def run(cfg: SimConfig, tables=None, trace: bool = False, engine: str = "numba",
        crn: bool = True, streams: DrawStreams | None = None) -> SimResult:
    """Simulate ``cfg.horizon`` slots from the empty network."""
    if cfg.policy.kind == PolicyKind.WHITTLE and tables is None:
        tables = whittle_tables(cfg)
    tab = np.zeros((cfg.K, 1)) if tables is None else np.asarray(tables, dtype=float)
    if streams is None:
        streams = DrawStreams(cfg.seed, cfg.rates, cfg.horizon, cfg.arrival,
                              _salt(cfg.policy, crn))
    if engine == "python":
        return _run_python(cfg, tab if tables is not None else None, streams, trace)
    if engine != "numba":
        raise ParameterError(f"unknown engine {engine!r}")
    w0, w1 = cfg.window
    sign = 1.0 if cfg.policy.index_order == "smallest" else -1.0
    (wc, dsum, ndep, blocked, arrivals, occ, occ_sum, occ_max, tr_ch, tr_occ, tr_cost,
     dep_log) = _run_kernel(int(cfg.policy.kind), float(cfg.policy.mixed_weight), sign,
                            streams.arrive, streams.depart, streams.u,
                            np.asarray(cfg.rates, dtype=float), np.asarray(cfg.costs, dtype=float),
                            tab, -1 if cfg.buffer is None else int(cfg.buffer), w0, w1, trace,
                            cfg.departure_rule == "pre")
    tr = None
    if trace:
        tr = {"chosen": tr_ch, "occupancy": tr_occ, "cost": tr_cost, "arrival": streams.arrive,
              "departures": dep_log}
    return _result(cfg, wc, dsum, ndep, blocked, arrivals, occ, occ_sum, occ_max, tr)


def _result(cfg, wc, dsum, ndep, blocked, arrivals, occ, occ_sum, occ_max, tr):
    arrivals, blocked, ndep = int(arrivals), int(blocked), int(ndep)
    return SimResult(
        avg_cost=float(wc.mean()),
        running_avg=np.cumsum(wc) / np.arange(1, len(wc) + 1),
        avg_delay=dsum / ndep if ndep else math.nan,
        blocking_prob=blocked / arrivals if arrivals else 0.0,
        arrivals=arrivals,
        admitted=arrivals - blocked,
        blocked=blocked,
        departures=ndep,
        final_occupancy=np.asarray(occ, dtype=np.int64).copy(),
        mean_occupancy=np.asarray(occ_sum, dtype=float) / cfg.horizon,
        max_occupancy=np.asarray(occ_max, dtype=np.int64).copy(),
        zero_arrivals=arrivals == 0,
        seed=cfg.seed,
        policy=cfg.policy.name,
        trace=tr,
    )


def _run_python(cfg, tables, streams, trace):
    T, K = cfg.horizon, cfg.K
    w0, w1 = cfg.window
    state = QueueState.idle(K)
    wc = np.empty(w1 - w0)
    occ_sum = np.zeros(K)
    occ_max = np.zeros(K, dtype=np.int64)
    dsum, ndep, blocked, arrivals = 0.0, 0, 0, 0
    tr_ch = np.full(T, -2, dtype=np.int64)
    tr_occ = np.zeros((T, K), dtype=np.int64)
    tr_cost = np.zeros(T)
    dep_log = []
    for n in range(T):
        state, rec = step(state, n, cfg, streams.draws(n), tables)
        if w0 <= n < w1:
            wc[n - w0] = rec.cost
        occ_sum += rec.occupancy
        occ_max = np.maximum(occ_max, rec.occupancy)
        tr_occ[n] = rec.occupancy
        tr_cost[n] = rec.cost
        if rec.arrival:
            arrivals += 1
            blocked += rec.chosen == BLOCKED
            tr_ch[n] = rec.chosen
        for i, a, d in rec.delays:
            dsum += d
            ndep += 1
            dep_log.append((i, a, n))
    tr = None
    if trace:
        tr = {"chosen": tr_ch, "occupancy": tr_occ, "cost": tr_cost, "arrival": streams.arrive,
              "departures": np.array(dep_log, dtype=np.int64).reshape(-1, 3)}
    return _result(cfg, wc, dsum, ndep, blocked, arrivals, state.occupancy, occ_sum, occ_max, tr)


METRICS = ("avg_cost", "avg_delay", "blocking_prob")


@dataclass
class ReplicateSummary:
    results: dict  # policy name -> list of SimResult in seed order
    seeds: list
    crn: bool
    stats: dict = field(default_factory=dict)  # policy -> metric -> (mean, std, ci_half)

    def mean(self, policy: str, metric: str = "avg_cost") -> float:
        return self.stats[policy][metric][0]

    def values(self, policy: str, metric: str = "avg_cost") -> np.ndarray:
        return np.array([getattr(res, metric) for res in self.results[policy]])


def _describe(vals, level=0.95):
    vals = np.asarray(vals, dtype=float)
    vals = vals[np.isfinite(vals)]
    if len(vals) == 0:
        return (math.nan, math.nan, math.nan)
    mean = float(vals.mean())
    if len(vals) < 2:
        return (mean, 0.0, math.nan)
    std = float(vals.std(ddof=1))
    half = float(stats.t.ppf(0.5 + level / 2, len(vals) - 1) * std / math.sqrt(len(vals)))
    return (mean, std, half)


def replicate_seeds(seed: int, n_seeds: int) -> list:
    return [seed + j for j in range(n_seeds)]


def run_replicates(cfg: SimConfig, n_seeds: int, policies: Sequence[Policy] | None = None,
                   crn: bool = True, tables=None) -> ReplicateSummary:
    """Run each policy on seeds cfg.seed, cfg.seed+1, ...

    With ``crn`` every policy consumes the same arrival/departure/tie streams
    for a given seed; without it each policy gets its own streams.
    """
    if n_seeds < 1:
        raise ParameterError("n_seeds must be >= 1")
    policies = list(policies) if policies is not None else [cfg.policy]
    seeds = replicate_seeds(cfg.seed, n_seeds)
    if tables is None and any(p.kind == PolicyKind.WHITTLE for p in policies):
        tables = whittle_tables(cfg)
    results: dict = {}
    keys = []
    for pol in policies:
        key = pol.name
        while key in results:
            key += "'"
        results[key] = []
        keys.append((key, pol))
    for s in seeds:
        shared = DrawStreams(s, cfg.rates, cfg.horizon, cfg.arrival, 0) if crn else None
        for key, pol in keys:
            c = replace(cfg, policy=pol, seed=s)
            results[key].append(run(c, tables=tables, crn=crn, streams=shared))
    summary = ReplicateSummary(results, seeds, crn)
    for key in results:
        summary.stats[key] = {m: _describe(summary.values(key, m)) for m in METRICS}
    return summary


SUMMARY_HEADER = ["scenario", "policy", "seed", "avg_cost", "avg_delay", "blocking_prob",
                  "arrivals", "blocked"]


def summary_rows(scenario: str, summary: ReplicateSummary):
    for key, runs in summary.results.items():
        for res in runs:
            yield [scenario, key, res.seed, repr(res.avg_cost), repr(res.avg_delay),
                   repr(res.blocking_prob), res.arrivals, res.blocked]


def write_trace_csv(path, cfg: SimConfig, res: SimResult, labels=None) -> None:
    """Per-slot trace; mBS numbers are 1-based in the order given by ``labels``."""
    tr = res.trace
    if tr is None:
        raise ParameterError("result has no trace; rerun with trace=True")
    K = cfg.K
    labels = list(range(K)) if labels is None else list(labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "arrival", "chosen_mbs", "blocked"] + [f"occ_{k + 1}" for k in range(K)]
                   + ["cost"])
        inv = np.argsort(labels)
        for n in range(cfg.horizon):
            ch = int(tr["chosen"][n])
            chosen = "" if ch < 0 else labels[ch] + 1
            occ = tr["occupancy"][n][inv]
            w.writerow([n, int(tr["arrival"][n]), chosen, int(ch == BLOCKED)]
                       + [int(v) for v in occ] + [repr(float(tr["cost"][n]))])


def write_departures_csv(path, res: SimResult, labels=None) -> None:
    tr = res.trace
    labels = None if labels is None else list(labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mbs", "arrival_slot", "departure_slot", "delay_inclusive", "delay_exclusive"])
        for i, a, n in tr["departures"]:
            mbs = (labels[i] if labels else int(i)) + 1
            w.writerow([mbs, int(a), int(n), int(n - a + 1), int(n - a)])
