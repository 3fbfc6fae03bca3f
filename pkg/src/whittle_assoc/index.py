"""Whittle index of the single-mBS chain.

For state ``x`` let V_lam be the relative values of the threshold-x policy
under tax ``lam`` and

    D(x, lam) = sum_z p_{z|x}(admit) V_lam(z) - sum_z p_{z|x}(reject) V_lam(z) - lam,

the admit-minus-reject gap of the dynamic-programming right-hand side.  The
index W(x) is the root of D(x, .).  Three routes are provided: the damped
fixed-point iteration lam <- lam + alpha*D, a direct solve using that D is
affine in lam, and bisection over the action chosen by relative value
iteration (independent of the policy-evaluation code).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

from .chain import Action, ChainParams, ParameterError, kernel
from .solver import (
    ConvergenceError,
    NumericalError,
    ThresholdPolicy,
    _rvi,
    _rvi_actions,
    as_fraction,
    evaluate_threshold,
    evaluate_threshold_exact,
    optimal_threshold,
    threshold_stats,
)

METHODS = ("iterative", "direct", "bisection")


@dataclass(frozen=True)
class IndexConfig:
    alpha: float = 0.5
    max_iters: int = 10_000
    conv_tol: float = 1e-9
    lambda_init: float = 0.0
    method: str = "direct"
    # bisection oracle settings
    bisect_tol: float = 1e-8
    rvi_tol: float = 1e-11
    rvi_margin: int = 15
    # direct method: exact rationals, or plain floats (fast, loses large indices)
    precision: str = "exact"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError("alpha must be > 0")
        if not self.conv_tol > 0:
            raise ParameterError("conv_tol must be > 0")
        if self.method not in METHODS:
            raise ParameterError(f"unknown index method {self.method!r}")
        if self.precision not in ("float", "exact"):
            raise ParameterError(f"unknown precision {self.precision!r}")


@dataclass(frozen=True)
class IndexResult:
    value: float
    iters: int
    residual: float


def indifference_gap(params: ChainParams, x: int, lam: float) -> float:
    """D(x, lam) evaluated with floating-point policy values."""
    sol = evaluate_threshold(params, ThresholdPolicy(x), lam)
    v = sol.v
    active = kernel(params, x, Action.ACTIVE).expect(v)
    passive = kernel(params, x, Action.PASSIVE).expect(v)
    return active - passive - lam


def indifference_gap_exact(params: ChainParams, x: int, lam) -> Fraction:
    v, _ = evaluate_threshold_exact(params, x, lam)
    p, r = as_fraction(params.p), as_fraction(params.r)
    up, down = p * (1 - r), (1 - p) * r
    if x == 0:
        active = up * v[1] + (1 - up) * v[0]
        passive = v[0]
    else:
        active = up * v[x + 1] + down * v[x - 1] + (1 - up - down) * v[x]
        passive = r * v[x - 1] + (1 - r) * v[x]
    return active - passive - as_fraction(lam)


@lru_cache(maxsize=32)
def _exact_prefix(params, n_states):
    return exact_indices(params, n_states)


def _gap_function(params, x, precision):
    if precision == "exact":
        # tables are shared between nearby states: sizes round up to a power of two
        root, slope = _exact_prefix(params, max(32, 1 << x.bit_length()))[x]
        if root is not None:
            # D(x, .) is affine: one rounding of the exact slope and root, no cancellation
            slope_f, root_f = float(slope), float(root)
            return lambda lam: slope_f * (lam - root_f)
    return lambda lam: indifference_gap(params, x, lam)


def index_iterate(params: ChainParams, x: int, cfg: IndexConfig = IndexConfig()) -> IndexResult:
    """lam_{k+1} = lam_k + alpha * D(x, lam_k) until |lam_{k+1} - lam_k| <= conv_tol.

    With ``cfg.precision="exact"`` the gap at each iterate is evaluated
    exactly, otherwise from a float policy evaluation.  Raises
    ConvergenceError (carrying the last iterate) when ``max_iters`` is
    exhausted or the iterates blow up.
    """
    if x < 0:
        raise ParameterError("state must be >= 0")
    gap = _gap_function(params, x, cfg.precision)
    lam = float(cfg.lambda_init)
    for k in range(1, cfg.max_iters + 1):
        try:
            d = gap(lam)
        except (OverflowError, ValueError):
            d = math.inf
        new = lam + cfg.alpha * d
        if not math.isfinite(new):
            raise ConvergenceError(f"index iteration diverged at state {x}", last=lam)
        if abs(new - lam) <= cfg.conv_tol:
            return IndexResult(new, k, abs(gap(new)))
        lam = new
    raise ConvergenceError(f"index iteration at state {x} did not converge in "
                           f"{cfg.max_iters} steps (alpha={cfg.alpha})", last=lam)


def index_iterate_with_retry(params: ChainParams, x: int, cfg: IndexConfig = IndexConfig(),
                             max_halvings: int = 8) -> IndexResult:
    """``index_iterate``, halving alpha after each non-convergence."""
    alpha = cfg.alpha
    for _ in range(max_halvings + 1):
        try:
            return index_iterate(params, x, _replace(cfg, alpha=alpha))
        except ConvergenceError as exc:
            last = exc
            alpha /= 2.0
    raise last


def _replace(cfg, **kw):
    d = dict(cfg.__dict__)
    d.update(kw)
    return IndexConfig(**d)


def _affine_root_float(params, x):
    d0 = indifference_gap(params, x, 0.0)
    d1 = indifference_gap(params, x, 1.0)
    return d0, d1 - d0


def index_direct(params: ChainParams, x: int, precision: str = "exact") -> IndexResult:
    """Root of the affine map lam -> D(x, lam).

    ``precision="exact"`` solves in rationals (see ``exact_indices``) and is
    the default: indices of heavily loaded chains grow geometrically and the
    float gap cannot resolve them.  ``"float"`` uses two float evaluations.
    """
    if x < 0:
        raise ParameterError("state must be >= 0")
    if precision == "float":
        a, b = _affine_root_float(params, x)
        if abs(b) < 1e-12:
            return index_bisect(params, x)
        lam = -a / b
        return IndexResult(lam, 2, abs(indifference_gap(params, x, lam)))
    if precision != "exact":
        raise ParameterError(f"unknown precision {precision!r}")
    root, slope = exact_indices(params, x + 1)[x]
    return _exact_result(root, slope, params, x)


def exact_indices(params: ChainParams, n_states: int) -> list:
    """Exact W(0..n_states-1) as ``(root, slope)`` pairs of Fractions, in one pass.

    Under threshold x every V(y), y <= x+1, equals a[y] + b[y]*rho with a, b
    from the same upward recursion whatever x is; only rho depends on x (and
    on lam, affinely).  With Delta(y) = V(y) - V(y-1),
    D(x, lam) = p(1-r) Delta(x+1) + p r Delta(x) - lam.  ``slope`` is dD/dlam.
    Returns ``(None, 0)`` for a state whose gap does not depend on lam.
    """
    p, r, C = as_fraction(params.p), as_fraction(params.r), as_fraction(params.cost_c)
    up, down = p * (1 - r), (1 - p) * r
    if up == 0:
        raise NumericalError("no upward moves (p = 0); the index is undefined")
    pr = p * r
    # da[y], db[y] are the increments a[y]-a[y-1], b[y]-b[y-1]; Delta(0) = 0
    da, db = [Fraction(0), Fraction(0)], [Fraction(0), 1 / up]
    for y in range(1, n_states):
        da.append((down * da[y] - C * y) / up)
        db.append((down * db[y] + 1) / up)
    out = []
    for x in range(n_states):
        y = x + 1
        s = 1 / (1 + r * db[y])
        rho0 = (C * y - r * da[y]) * s
        A = up * da[y] + pr * da[x]
        B = up * db[y] + pr * db[x]
        slope = B * s - 1
        out.append((None if slope == 0 else -(A + B * rho0) / slope, slope))
    return out


def _exact_result(root, slope, params, x):
    if root is None:
        return index_bisect(params, x)
    lam = _to_float(root)
    res = abs(float(slope * (Fraction(lam) - root))) if math.isfinite(lam) else math.inf
    return IndexResult(lam, 2, res)


def _to_float(q: Fraction) -> float:
    try:
        return float(q)
    except OverflowError:
        return math.inf if q > 0 else -math.inf


def _bisect_many(params, xs, lo, hi, tol, rvi_tol, margin, max_expand=200, resolve_tol=1e-6):
    """Bisection on lam for several states at once, sharing RVI sweeps.

    At each lam the RVI-optimal action at state x is reject for lam below the
    index and admit above it.  ``tol`` is relative to max(1, |lam|); wide
    brackets on one side of zero are split geometrically.  When the two action
    values at a midpoint differ by less than their rounding level, the lane
    stops there if that level, converted to lam units with the slope across
    the bracket, is within ``resolve_tol`` (relative); otherwise the index is
    not resolvable in floating point.  Returns (values, unresolved mask).
    """
    xs = np.asarray(xs, dtype=int)
    m = len(xs)
    n_states = int(xs.max()) + margin + 2
    lo = np.full(m, float(lo))
    hi = np.full(m, float(hi))
    h_all = np.zeros((m, n_states))

    def acts(sel, lams, warm):
        # RVI only on the lanes in ``sel``; returns per-lane action, q-gap and rounding level
        xsel = xs[sel]
        h, _, qa, qp = _rvi(params, lams, n_states, rvi_tol, 500_000,
                            h0=h_all[sel] if warm else None)
        h_all[sel] = h
        r = np.arange(len(sel))
        near = np.abs(h[r[:, None], np.maximum(xsel[:, None] + np.arange(-1, 2)[None, :], 0)])
        noise = 16 * np.finfo(float).eps * (near.max(axis=1) + np.abs(lams) + params.cost_c * xsel)
        return _rvi_actions(qa, qp, 0.0)[r, xsel], qa[r, xsel] - qp[r, xsel], noise

    # widen the bracket (by a factor ~8 per round) until reject at lo and admit at hi
    d_lo = np.empty(m)
    d_hi = np.empty(m)
    need_lo = np.ones(m, dtype=bool)
    need_hi = np.ones(m, dtype=bool)
    for _ in range(max_expand + 1):
        for need, ends, gaps, want in ((need_lo, lo, d_lo, Action.PASSIVE),
                                       (need_hi, hi, d_hi, Action.ACTIVE)):
            sel = np.flatnonzero(need)
            if sel.size:
                act, gap, _ = acts(sel, ends[sel], False)
                gaps[sel] = gap
                need[sel] = act != want
        if not (need_lo.any() or need_hi.any()):
            break
        width = hi - lo
        lo = np.where(need_lo, lo - 8.0 * width, lo)
        hi = np.where(need_hi, hi + 8.0 * width, hi)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise NumericalError("could not bracket the index below float overflow")
    else:
        raise NumericalError(f"could not bracket the index within {max_expand} expansions")

    stuck = np.zeros(m, dtype=bool)
    warm = False
    while True:
        scale = np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
        sel = np.flatnonzero((hi - lo > tol * scale) & ~stuck)
        if not sel.size:
            break
        l, u = lo[sel], hi[sel]
        geo_pos = (l > 0) & (u > 4.0 * l)
        geo_neg = (u < 0) & (l < 4.0 * u)
        mid = np.where(geo_pos, np.sqrt(np.abs(l * u)),
                       np.where(geo_neg, -np.sqrt(np.abs(l * u)), 0.5 * (l + u)))
        act, gap, noise = acts(sel, mid, warm)
        warm = True
        tie = np.abs(gap) <= noise
        if tie.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                res = noise * (u - l) / np.abs(d_hi[sel] - d_lo[sel])
            ok = tie & (res <= resolve_tol * scale[sel])
            lo[sel[ok]] = hi[sel[ok]] = mid[ok]
            stuck[sel[tie & ~ok]] = True
        admit = ~tie & (act == Action.ACTIVE)
        reject = ~tie & (act != Action.ACTIVE)
        hi[sel[admit]], d_hi[sel[admit]] = mid[admit], gap[admit]
        lo[sel[reject]], d_lo[sel[reject]] = mid[reject], gap[reject]
    scale = np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    return 0.5 * (lo + hi), stuck & (hi - lo > resolve_tol * scale)


def index_bisect(params: ChainParams, x: int, lo: float = -1.0, hi: float = 10.0,
                 tol: float = 1e-8, rvi_tol: float = 1e-11, margin: int = 15) -> IndexResult:
    """Tax at which the RVI-optimal action at ``x`` flips from reject to admit."""
    if x < 0:
        raise ParameterError("state must be >= 0")
    vals, loose = _bisect_many(params, [x], lo, hi, tol, rvi_tol, margin)
    if loose[0]:
        raise NumericalError(f"index at state {x} is below the float resolution of RVI")
    lam = float(vals[0])
    return IndexResult(lam, 0, abs(indifference_gap(params, x, lam)))


def bisect_indices(params: ChainParams, states: Sequence[int], tol: float = 1e-8,
                   rvi_tol: float = 1e-11, margin: int = 15) -> np.ndarray:
    """Vectorised ``index_bisect`` over many states; nan where RVI cannot resolve the index."""
    vals, loose = _bisect_many(params, list(states), -1.0, 10.0, tol, rvi_tol, margin)
    return np.where(loose, np.nan, vals)


@dataclass
class IndexTable:
    values: np.ndarray
    residuals: np.ndarray  # nan where interpolated
    computed: np.ndarray  # bool mask of exactly-computed states
    method: str
    config: IndexConfig
    mbs_id: int = 0
    violations: list = field(default_factory=list)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, x):
        return self.values[x]

    def is_monotone(self) -> bool:
        return not self.violations


class MonotonicityError(NumericalError):
    pass


def _compute_one(params, x, cfg):
    if cfg.method == "direct":
        return index_direct(params, x, precision=cfg.precision)
    if cfg.method == "iterative":
        return index_iterate_with_retry(params, x, cfg)
    return index_bisect(params, x, tol=cfg.bisect_tol, rvi_tol=cfg.rvi_tol, margin=cfg.rvi_margin)


def build_table(params: ChainParams, n_states: int = 200, grid_stride: int = 1,
                cfg: IndexConfig = IndexConfig(), mbs_id: int = 0,
                allow_nonmonotone: bool = False, workers: int = 1) -> IndexTable:
    """Index at states {0, s, 2s, ..., n_states-1}, linear interpolation in between."""
    if grid_stride < 1:
        raise ParameterError("grid_stride must be >= 1")
    if n_states < 1:
        raise ParameterError("n_states must be >= 1")
    grid = list(range(0, n_states, grid_stride))
    if grid[-1] != n_states - 1:
        grid.append(n_states - 1)

    if cfg.method == "bisection":
        vals = bisect_indices(params, grid, cfg.bisect_tol, cfg.rvi_tol, cfg.rvi_margin)
        if np.isnan(vals).any():
            lost = [x for x, v in zip(grid, vals) if np.isnan(v)]
            raise NumericalError(f"bisection cannot resolve the index of mBS {mbs_id} "
                                 f"at states {lost[:5]}{'...' if len(lost) > 5 else ''}")
        results = [IndexResult(float(v), 0, abs(indifference_gap(params, x, float(v))))
                   for x, v in zip(grid, vals)]
    elif cfg.method == "direct" and cfg.precision != "float":
        exact = exact_indices(params, n_states)
        results = [_exact_result(*exact[x], params, x) for x in grid]
    elif workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_compute_one, [params] * len(grid), grid, [cfg] * len(grid)))
    else:
        results = [_compute_one(params, x, cfg) for x in grid]

    values = np.empty(n_states)
    residuals = np.full(n_states, np.nan)
    computed = np.zeros(n_states, dtype=bool)
    gv = np.array([res.value for res in results])
    for x, res in zip(grid, results):
        residuals[x] = res.residual
        computed[x] = True
    if grid_stride == 1:
        values[:] = gv
    else:
        values[:] = np.interp(np.arange(n_states), grid, gv)
    violations = [(x, float(values[x]), float(values[x + 1]))
                  for x in range(n_states - 1) if values[x + 1] < values[x]]
    table = IndexTable(values, residuals, computed, cfg.method, cfg, mbs_id, violations)
    if violations and not allow_nonmonotone:
        raise MonotonicityError(f"index table for mBS {mbs_id} decreases at states "
                                f"{[v[0] for v in violations[:5]]}")
    return table


def write_tables_csv(tables: Sequence[IndexTable], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mbs_id", "state", "whittle_index", "method", "residual"])
        for tab in tables:
            for x in range(len(tab)):
                method = tab.method if tab.computed[x] else "interpolated"
                w.writerow([tab.mbs_id, x, repr(float(tab.values[x])), method,
                            "" if np.isnan(tab.residuals[x]) else repr(float(tab.residuals[x]))])


def read_tables_csv(path) -> dict:
    """mbs_id -> array of index values."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["mbs_id"]), []).append((int(row["state"]),
                                                           float(row["whittle_index"])))
    return {k: np.array([v for _, v in sorted(rows)]) for k, rows in out.items()}


@dataclass
class SweepReport:
    passed: bool
    pairs: list  # (lam, t(lam))
    drops: list  # (lam_prev, t_prev, lam, t)


def indexability_sweep(params: ChainParams, lambda_grid, t_max: int = 500) -> SweepReport:
    """Optimal threshold along a sorted tax grid; passes iff it never decreases."""
    lams = [float(v) for v in lambda_grid]
    if any(b < a for a, b in zip(lams, lams[1:])):
        raise ParameterError("lambda grid must be sorted in increasing order")
    stats = threshold_stats(params, t_max)
    pairs = [(lam, optimal_threshold(params, lam, t_max, stats=stats)) for lam in lams]
    drops = [(l0, t0, l1, t1) for (l0, t0), (l1, t1) in zip(pairs, pairs[1:]) if t1 < t0]
    return SweepReport(not drops, pairs, drops)
