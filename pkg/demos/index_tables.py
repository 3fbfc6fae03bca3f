"""
Index tables for a single base station
======================================

Each base station, taken on its own, is a birth-death chain: an admitted user
joins with probability p(1-r), one user leaves with probability r.  Its index
W(x) is the tax on turning an arrival away at which admitting and rejecting
cost the same.
"""
import numpy as np

from whittle_assoc import ChainParams, build_table, index_direct, index_iterate
from whittle_assoc.index import bisect_indices
from whittle_assoc.solver import optimal_threshold_exact

# a lightly loaded station: p = 0.4, r = 0.5, holding cost 1 per user per slot
light = ChainParams(0.4, 0.5, 1.0)
table = build_table(light, 12)
print("W(x), light load:", np.round(table.values, 4))

# the same numbers three ways: closed form, damped fixed point, RVI bisection
for x in (0, 5, 11):
    d = index_direct(light, x).value
    it = index_iterate(light, x).value
    b = bisect_indices(light, [x], tol=1e-12)[0]
    print(f"x={x:2d}  direct {d:.9f}  iterate {it:.9f}  bisect {b:.9f}")

# W is linear in the holding cost, so tables for real costs are rescaled copies
costly = build_table(ChainParams(0.4, 0.5, 45.0), 12)
print("scale check:", np.allclose(costly.values, 45.0 * table.values))

# a tax strictly between W(x-1) and W(x) makes threshold x-1 optimal
for x in (3, 7):
    lam = 0.5 * (table.values[x - 1] + table.values[x])
    print(f"tax {lam:.3f} -> optimal threshold {optimal_threshold_exact(light, lam)}")

# when arrivals outpace departures the index explodes geometrically;
# float RVI loses the sign of the gap long before state 30
heavy = ChainParams(0.9, 0.42, 1.0)
w = build_table(heavy, 31).values
print("heavy load W(0), W(10), W(30):", w[0], w[10], w[30])
print("bisection, states 0..11:", bisect_indices(heavy, range(12), tol=1e-12))
