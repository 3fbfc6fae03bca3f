"""Structural checks on a single chain, gathered into one machine-readable report."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .chain import ChainParams, default_sigma, lyapunov_drift_check
from .index import indexability_sweep
from .solver import (
    ConvergenceError,
    ThresholdPolicy,
    evaluate_threshold,
    optimal_threshold,
    rvi_optimal,
    submodularity_check,
    threshold_cost,
    threshold_stats,
)

DEFAULT_LAMBDAS = tuple(np.round(np.arange(-5.0, 50.0 + 1e-9, 0.5), 10))
DEFAULT_T_MAX = 60


@dataclass
class Check:
    name: str
    status: str  # "pass", "fail" or "hypothesis violated"
    detail: str = ""
    witness: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.status == "fail"


def value_shape_violations(v, tol: float = 1e-9) -> list:
    """Positions where V decreases or its increments decrease (beyond ``tol`` relative)."""
    v = np.asarray(v, dtype=float)
    scale = max(1.0, float(np.max(np.abs(v)))) if v.size else 1.0
    d = np.diff(v)
    out = [("decrease", int(i)) for i in np.flatnonzero(d < -tol * scale)]
    out += [("concave", int(i) + 1) for i in np.flatnonzero(np.diff(d) < -tol * scale)]
    return out


def check_lyapunov(params: ChainParams, t: int) -> Check:
    sigma = default_sigma(params)
    rep = lyapunov_drift_check(params, sigma, ThresholdPolicy(t), max_state=t + 1)
    if rep.status != "ok":
        return Check("lyapunov", "hypothesis violated",
                     "r(1-p)/p <= 1: no exponential moment bound to check")
    return Check("lyapunov", "pass" if rep.passed else "fail",
                 f"sigma={sigma:.6g} delta={rep.delta:.6g}",
                 [] if rep.passed else [rep.max_drift_ratio])


def check_value_shape(params: ChainParams, lambdas, t_max: int, stats=None) -> Check:
    stats = stats if stats is not None else threshold_stats(params, t_max)
    bad = []
    for lam in lambdas:
        t = optimal_threshold(params, lam, t_max, stats=stats)
        for kind, x in value_shape_violations(evaluate_threshold(params, ThresholdPolicy(t), lam).v):
            bad.append([float(lam), t, kind, x])
    return Check("value_shape", "fail" if bad else "pass",
                 f"{len(lambdas)} optimal value vectors", bad[:20])


def check_submodularity(params: ChainParams, lambdas, t_max: int, tamper: bool = False) -> list:
    g = None
    if tamper:
        # negative control: the tax is credited instead of charged
        def g(lam, t):
            return threshold_cost(params, -lam, t)
    rep = submodularity_check(params, lambdas, range(-1, t_max + 1), g=g)
    sub = Check("submodularity", "fail" if rep.n_violations else "pass",
                f"{rep.n_violations} violating quadruples",
                [list(v) for v in rep.violations[:20]])
    mass = Check("admitted_mass", "fail" if rep.mass_violations else "pass",
                 "cumulative stationary mass over admitting states increases with t",
                 [list(v) for v in rep.mass_violations[:20]])
    return [mass, sub]


def check_indexability(params: ChainParams, lambdas, t_max: int) -> Check:
    rep = indexability_sweep(params, lambdas, t_max)
    return Check("indexability", "pass" if rep.passed else "fail",
                 f"t(lam) from {rep.pairs[0][1]} to {rep.pairs[-1][1]}",
                 [list(d) for d in rep.drops[:20]])


def check_rvi_threshold(params: ChainParams, lambdas, t_max: int, n_probe: int = 6) -> Check:
    """RVI on the truncated chain returns a threshold rule that matches the enumeration."""
    stats = threshold_stats(params, t_max + 40)
    bad = []
    lams = [lambdas[i] for i in np.linspace(0, len(lambdas) - 1, n_probe).astype(int)]
    for lam in lams:
        t = optimal_threshold(params, lam, t_max + 40, stats=stats)
        if t > t_max:
            continue  # optimum beyond the truncation; nothing to compare
        try:
            sol, actions = rvi_optimal(params, lam, n_states=t_max + 40)
        except ConvergenceError as exc:
            bad.append([float(lam), "no convergence", str(exc)])
            continue
        if sol.policy is None:
            bad.append([float(lam), "not threshold", actions.tolist()[: t + 4]])
        elif sol.policy.t != t:
            # distinct thresholds whose costs agree to rounding are both optimal
            g_rvi, g_opt = (threshold_cost(params, lam, s) for s in (sol.policy.t, t))
            if g_rvi - g_opt > 1e-9 * max(1.0, abs(g_opt)):
                bad.append([float(lam), "threshold mismatch", sol.policy.t, t])
    return Check("rvi_threshold", "fail" if bad else "pass", f"{len(lams)} tax values", bad)


def diagnose_chain(params: ChainParams, lambdas=DEFAULT_LAMBDAS, t_max: int = DEFAULT_T_MAX,
                   tamper: bool = False) -> list:
    lambdas = [float(v) for v in lambdas]
    stats = threshold_stats(params, t_max)
    checks = [check_lyapunov(params, t_max),
              check_value_shape(params, lambdas, t_max, stats)]
    checks += check_submodularity(params, lambdas, t_max, tamper)
    checks += [check_indexability(params, lambdas, t_max),
               check_rvi_threshold(params, lambdas, t_max)]
    return checks


def report_dict(label: str, params: ChainParams, checks) -> dict:
    return {"chain": label, "p": params.p, "r": params.r, "cost": params.cost_c,
            "passed": not any(c.failed for c in checks),
            "checks": [asdict(c) for c in checks]}
