"""Average-cost evaluation of threshold policies plus brute-force oracles.

A threshold policy with threshold ``t`` admits at states 0..t and rejects
above; its recurrent class is {0, ..., t+1}.  Every quantity here is for the
single-chain problem with per-slot cost ``C*x + lam*[reject]``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numba
import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .chain import Action, ChainParams, ParameterError, kernel

DENSE_LIMIT = 1000
TIE_EPS = 1e-10


class NumericalError(RuntimeError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


@dataclass(frozen=True)
class ThresholdPolicy:
    t: int

    def __post_init__(self):
        if self.t < -1:
            raise ParameterError(f"threshold {self.t} < -1")

    def action(self, x: int) -> Action:
        return Action.ACTIVE if x <= self.t else Action.PASSIVE

    @property
    def n_states(self) -> int:
        """Size of the recurrent class {0..t+1}."""
        return self.t + 2


@dataclass(frozen=True)
class ValueSolution:
    v: np.ndarray
    rho: float
    lam: float
    policy: ThresholdPolicy | None
    residual: float = 0.0


@dataclass(frozen=True)
class StationaryDistribution:
    mu: np.ndarray

    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.mu)), self.mu))


def transition_matrix(params: ChainParams, policy: ThresholdPolicy) -> np.ndarray:
    """Dense transition matrix of the policy restricted to {0..t+1}."""
    n = max(policy.n_states, 1)
    P = np.zeros((n, n))
    for y in range(n):
        for z, q in kernel(params, y, policy.action(y)).support:
            P[y, z] += q
    return P


def _policy_costs(params, policy, lam, n):
    x = np.arange(n, dtype=float)
    return params.cost_c * x + lam * (x > policy.t)


def evaluate_threshold(params: ChainParams, policy: ThresholdPolicy, lam: float) -> ValueSolution:
    """Solve V(y) = c(y) - rho + sum_z P(y,z) V(z), V(0) = 0 on {0..t+1}.

    Rows y <= t use the admit kernel, row t+1 the reject kernel with the tax.
    """
    if policy.t == -1:
        return ValueSolution(np.zeros(1), float(lam), float(lam), policy, 0.0)
    P = transition_matrix(params, policy)
    n = P.shape[0]
    c = _policy_costs(params, policy, lam, n)
    # unknowns: V(1..n-1), rho
    I_minus_P = np.eye(n) - P
    if n <= DENSE_LIMIT:
        A = np.empty((n, n))
        A[:, :-1] = I_minus_P[:, 1:]
        A[:, -1] = 1.0
        try:
            sol = np.linalg.solve(A, c)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular policy-evaluation system (t={policy.t})") from exc
    else:
        A = scipy.sparse.lil_matrix((n, n))
        for y in range(n):
            for z in (y - 1, y, y + 1):
                if 1 <= z < n and I_minus_P[y, z] != 0.0:
                    A[y, z - 1] = I_minus_P[y, z]
        A[:, n - 1] = np.ones((n, 1))
        sol = scipy.sparse.linalg.spsolve(A.tocsc(), c)
    if not np.all(np.isfinite(sol)):
        raise NumericalError(f"non-finite policy values (t={policy.t})")
    v = np.concatenate(([0.0], sol[:-1]))
    rho = float(sol[-1])
    resid = float(np.max(np.abs(v - (c - rho + P @ v))))
    return ValueSolution(v, rho, float(lam), policy, resid)


def as_fraction(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, int):
        return Fraction(v)
    return Fraction(repr(float(v)))


def evaluate_threshold_exact(params: ChainParams, t: int, lam) -> tuple:
    """Exact rational solution ``(v, rho)`` of the same system.

    Parameters are read as the decimals they print as (0.9 -> 9/10), which
    keeps the rationals short; the error against the binary float is below
    one ulp.  The equations are
    eliminated top-down along the birth-death structure, carrying every V(y)
    as an affine function of rho, so the cost is O(t) big-rational operations.
    """
    lam = as_fraction(lam)
    if t == -1:
        return [Fraction(0)], lam
    p, r, C = as_fraction(params.p), as_fraction(params.r), as_fraction(params.cost_c)
    up, down = p * (1 - r), (1 - p) * r
    n = t + 2
    # V(y) = a[y] + b[y]*rho
    a = [Fraction(0)] * n
    b = [Fraction(0)] * n
    # row 0 (admit): up*(V(1) - V(0)) = rho - c(0), c(0) = 0
    a[1], b[1] = Fraction(0), 1 / up
    for y in range(1, n - 1):
        # admit row: up*(V(y+1)-V(y)) - down*(V(y)-V(y-1)) = rho - C*y
        da = (down * (a[y] - a[y - 1]) - C * y) / up
        db = (down * (b[y] - b[y - 1]) + 1) / up
        a[y + 1] = a[y] + da
        b[y + 1] = b[y] + db
    # top row (reject): -r*(V(n-1) - V(n-2)) = rho - C*(n-1) - lam
    y = n - 1
    # -r*(a_d + b_d*rho) = rho - C*y - lam
    a_d, b_d = a[y] - a[y - 1], b[y] - b[y - 1]
    rho = (C * y + lam - r * a_d) / (1 + r * b_d)
    v = [ai + bi * rho for ai, bi in zip(a, b)]
    return v, rho


def stationary_distribution(params: ChainParams, policy: ThresholdPolicy) -> StationaryDistribution:
    """Stationary law on {0..t+1} from detailed balance, computed in log space."""
    if policy.t == -1:
        return StationaryDistribution(np.ones(1))
    n = policy.n_states
    up, down = params.up, params.down
    if up == 0.0:
        mu = np.zeros(n)
        mu[0] = 1.0
        return StationaryDistribution(mu)
    log_step = np.full(n - 1, math.log(up) - math.log(down))
    # last step enters the reject state, which only moves down w.p. r
    log_step[-1] = math.log(up) - math.log(params.r)
    logw = np.concatenate(([0.0], np.cumsum(log_step)))
    w = np.exp(logw - logw.max())
    return StationaryDistribution(w / w.sum())


def threshold_stats(params: ChainParams, t_max: int) -> tuple:
    """Arrays over t = -1..t_max of mean occupancy E_t and reject mass R_t.

    g(lam, t) = C * E_t + lam * R_t is the long-run cost of threshold ``t``.
    """
    E = np.empty(t_max + 2)
    R = np.empty(t_max + 2)
    for i, t in enumerate(range(-1, t_max + 1)):
        mu = stationary_distribution(params, ThresholdPolicy(t)).mu
        E[i] = np.dot(np.arange(len(mu)), mu)
        R[i] = mu[t + 1:].sum()
    return E, R


def threshold_cost(params: ChainParams, lam: float, t: int) -> float:
    mu = stationary_distribution(params, ThresholdPolicy(t)).mu
    return float(params.cost_c * np.dot(np.arange(len(mu)), mu) + lam * mu[t + 1:].sum())


def optimal_threshold(params: ChainParams, lam: float, t_max: int = 500, stats=None) -> int:
    """Smallest t in -1..t_max minimising g(lam, t)."""
    E, R = stats if stats is not None else threshold_stats(params, t_max)
    g = params.cost_c * E + lam * R
    gmin = g.min()
    tol = 1e-12 * max(1.0, abs(gmin))
    i = int(np.flatnonzero(g <= gmin + tol)[0])
    if i == len(g) - 1:
        warnings.warn(f"optimal threshold hit the scan edge t_max={t_max}", RuntimeWarning,
                      stacklevel=2)
    return i - 1


def threshold_stats_exact(params: ChainParams, t_max: int) -> tuple:
    """``threshold_stats`` in exact rationals (lists of Fractions over t = -1..t_max)."""
    p, r = as_fraction(params.p), as_fraction(params.r)
    up, down = p * (1 - r), (1 - p) * r
    E, R = [Fraction(0)], [Fraction(1)]
    if up == 0:
        return E + [Fraction(0)] * (t_max + 1), R + [Fraction(0)] * (t_max + 1)
    q = up / down
    # unnormalised law: q^x on 0..t, then q^t * up/r at t+1
    s0, s1, qt = Fraction(0), Fraction(0), Fraction(1)
    for t in range(t_max + 1):
        s0 += qt
        s1 += t * qt
        top = qt * up / r
        z = s0 + top
        E.append((s1 + (t + 1) * top) / z)
        R.append(top / z)
        qt *= q
    return E, R


def optimal_threshold_exact(params: ChainParams, lam, t_max: int = 500, stats=None) -> int:
    """``optimal_threshold`` without rounding: resolves taxes where float g values tie."""
    E, R = stats if stats is not None else threshold_stats_exact(params, t_max)
    C, lam = as_fraction(params.cost_c), as_fraction(lam)
    g = [C * e + lam * rr for e, rr in zip(E, R)]
    best = min(g)
    i = g.index(best)
    if i == len(g) - 1:
        warnings.warn(f"optimal threshold hit the scan edge t_max={t_max}", RuntimeWarning,
                      stacklevel=2)
    return i - 1


def truncated_kernels(params: ChainParams, n_states: int) -> tuple:
    """Admit/reject matrices on {0..n-1}, read as a buffer of n-1 users.

    Admission is not available in the top state, so its admit row is the
    reject row (callers charge the tax there for both actions).
    """
    Pa = np.zeros((n_states, n_states))
    Pp = np.zeros((n_states, n_states))
    for x in range(n_states):
        for z, q in kernel(params, x, Action.PASSIVE).support:
            Pp[x, z] += q
        if x < n_states - 1:
            for z, q in kernel(params, x, Action.ACTIVE).support:
                Pa[x, z] += q
    Pa[-1] = Pp[-1]
    return Pa, Pp


@numba.njit(cache=True)
def _rvi_kernel(up, down, r, C, lams, h, tol, max_iter):
    # each row (tax value) stops on its own once its span falls below tol
    m, n = h.shape
    qa = np.empty(n)
    qp = np.empty(n)
    hn = np.empty(n)
    stay = 1.0 - up - down
    spans = np.full(m, np.inf)
    worst = 0
    for k in range(m):
        lam = lams[k]
        for it in range(max_iter):
            for x in range(n):
                cx = C * x
                if x == 0:
                    qa[0] = up * h[k, 1] + (1.0 - up) * h[k, 0]
                    qp[0] = lam + h[k, 0]
                elif x == n - 1:
                    # full buffer: the arrival is rejected whatever the action
                    qp[x] = cx + lam + r * h[k, x - 1] + (1.0 - r) * h[k, x]
                    qa[x] = qp[x]
                else:
                    qa[x] = cx + up * h[k, x + 1] + down * h[k, x - 1] + stay * h[k, x]
                    qp[x] = cx + lam + r * h[k, x - 1] + (1.0 - r) * h[k, x]
            base = min(qa[0], qp[0])
            dmax = -np.inf
            dmin = np.inf
            vmax = 0.0
            for x in range(n):
                v = min(qa[x], qp[x]) - base
                d = v - h[k, x]
                dmax = max(dmax, d)
                dmin = min(dmin, d)
                vmax = max(vmax, abs(v), abs(lam))
                hn[x] = v
            for x in range(n):
                h[k, x] = hn[x]
            # no point asking for more than the values' own rounding level
            spans[k] = (dmax - dmin) - 4.0 * 2.220446049250313e-16 * vmax
            if spans[k] <= tol:
                worst = max(worst, it + 1)
                break
        if spans[k] > tol:
            return h, -1, spans[k]
    return h, worst, spans.max()


def _rvi(params, lams, n_states, tol, max_iter, h0=None):
    """Relative value iteration for a batch of taxes; returns (h, rho, qa, qp).

    Row k of each array belongs to ``lams[k]``; ``h`` is normalised so that
    h[:, 0] = 0 and ``rho`` is the average-cost estimate.
    """
    lams = np.atleast_1d(np.asarray(lams, dtype=float))
    h = np.zeros((len(lams), n_states)) if h0 is None else np.array(h0, dtype=float)
    h, iters, span = _rvi_kernel(params.up, params.down, params.r, float(params.cost_c),
                                 lams, h, tol, max_iter)
    if iters < 0:
        raise ConvergenceError(f"RVI did not converge in {max_iter} iterations (span {span:.3g})",
                               last=span)
    Pa, Pp = truncated_kernels(params, n_states)
    ca = params.cost_c * np.arange(n_states, dtype=float)
    qa = ca + h @ Pa.T
    qp = ca + lams[:, None] + h @ Pp.T
    qa[:, -1] = qp[:, -1]
    rho = np.minimum(qa, qp)[:, 0]
    return h, rho, qa, qp


def _rvi_actions(qa, qp, eps=TIE_EPS):
    # ties go to reject
    return np.where(qa < qp - eps, Action.ACTIVE, Action.PASSIVE)


def is_threshold_rule(actions) -> bool:
    """Admit on an initial segment of states and reject on the rest."""
    a = np.asarray(actions, dtype=int)
    return bool(np.all(np.diff(a) <= 0))


def rvi_optimal(params: ChainParams, lam: float, n_states: int = 200, tol: float = 1e-10,
                max_iter: int = 200_000) -> tuple:
    """Average-cost optimal policy of the truncated chain by relative value iteration.

    Returns ``(ValueSolution, actions)``.  ``ValueSolution.policy`` is the
    equivalent threshold policy, or None if the action map is not a threshold
    rule.
    """
    if n_states < 3:
        raise ParameterError("n_states must be >= 3")
    h, rho, qa, qp = _rvi(params, [lam], n_states, tol, max_iter)
    actions = _rvi_actions(qa, qp)[0]
    pol = None
    if is_threshold_rule(actions):
        pol = ThresholdPolicy(int(np.sum(actions == Action.ACTIVE)) - 1)
    th = np.minimum(qa, qp)[0]
    resid = float(np.max(np.abs(h[0] - (th - rho[0]))))
    return ValueSolution(h[0], float(rho[0]), float(lam), pol, resid), actions


def discounted_vi(params: ChainParams, lam: float, beta: float, n_states: int = 200,
                  tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Relative discounted values V_beta(x) - V_beta(0) on the truncated chain.

    Subtracting the state-0 value after each Bellman step leaves the relative
    values unchanged but removes the 1/(1-beta) growth, so convergence is
    governed by the chain's mixing rather than by how close beta is to one.
    """
    if not 0.0 < beta < 1.0:
        raise ParameterError(f"beta={beta} not in (0, 1)")
    Pa, Pp = truncated_kernels(params, n_states)
    cp = params.cost_c * np.arange(n_states, dtype=float) + lam
    ca = cp - lam
    ca[-1] = cp[-1]
    w = np.zeros(n_states)
    for _ in range(max_iter):
        tw = np.minimum(ca + beta * (Pa @ w), cp + beta * (Pp @ w))
        w_new = tw - tw[0]
        diff = w_new - w
        w = w_new
        if diff.max() - diff.min() <= tol:
            return w
    raise ConvergenceError("discounted value iteration did not converge")


@dataclass
class SubmodularityReport:
    passed: bool
    violations: list = field(default_factory=list)  # (lam1, lam2, t1, t2, margin), capped
    mass_violations: list = field(default_factory=list)  # (t, t+1, mass_t, mass_t1)
    n_violations: int = 0

    def summary(self) -> str:
        return (f"submodular={'yes' if not self.n_violations else 'no'} "
                f"({self.n_violations} violations), cumulative mass monotone="
                f"{'yes' if not self.mass_violations else 'no'}")


def submodularity_check(params: ChainParams, lambda_grid, t_grid, g=None,
                        tol: float = 1e-9, max_witnesses: int = 1000) -> SubmodularityReport:
    """Check g(l1,t2) + g(l2,t1) >= g(l1,t1) + g(l2,t2) for l2 < l1, t2 < t1.

    Also checks that the admitted stationary mass sum_{j<=t} mu_t(j) increases
    with t.  ``g`` may be replaced (e.g. by a deliberately broken cost) to
    exercise the failure path.
    """
    lams = np.asarray(lambda_grid, dtype=float)
    ts = np.asarray(t_grid, dtype=int)
    if np.any(np.diff(lams) <= 0) or np.any(np.diff(ts) <= 0):
        raise ParameterError("grids must be strictly increasing")
    if ts.size and ts[0] < -1:
        raise ParameterError("thresholds start at -1")
    if g is None:
        E, R = threshold_stats(params, int(ts.max()))
        E, R = E[ts + 1], R[ts + 1]
        G = params.cost_c * E[None, :] + lams[:, None] * R[None, :]
    else:
        G = np.array([[g(lam, int(t)) for t in ts] for lam in lams])
    report = SubmodularityReport(True)
    scale = max(1.0, float(np.max(np.abs(G)))) if G.size else 1.0
    # margin = D(l1) - D(l2) with D(l) = g(l, t2) - g(l, t1), over pairs t2 < t1
    j1, j2 = np.tril_indices(len(ts), k=-1)
    D = G[:, j2] - G[:, j1]
    for i1 in range(1, len(lams)):
        margin = D[i1][None, :] - D[:i1]
        bad_mask = margin < -tol * scale
        n_bad = int(np.count_nonzero(bad_mask))
        if not n_bad:
            continue
        report.n_violations += n_bad
        for i2, k in np.argwhere(bad_mask)[:max(0, max_witnesses - len(report.violations))]:
            report.violations.append((float(lams[i1]), float(lams[i2]), int(ts[j1[k]]),
                                      int(ts[j2[k]]), float(margin[i2, k])))
    mass = np.array([stationary_distribution(params, ThresholdPolicy(int(t))).mu[:t + 1].sum()
                     for t in ts])
    for j in range(len(ts) - 1):
        if mass[j + 1] < mass[j] - 1e-12:
            report.mass_violations.append((int(ts[j]), int(ts[j + 1]), float(mass[j]),
                                           float(mass[j + 1])))
    report.passed = not report.n_violations and not report.mass_violations
    return report
