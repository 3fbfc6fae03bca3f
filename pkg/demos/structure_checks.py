"""
Structural checks
=================

The index rule rests on a few structural facts about the single-station
problem: thresholds are optimal, the optimal threshold rises with the tax,
and the long-run cost is submodular in (tax, threshold).  Here they are
checked numerically on one chain, then on a deliberately broken cost.
"""
from whittle_assoc import ChainParams
from whittle_assoc.diagnostics import diagnose_chain

chain = ChainParams(0.3, 0.55, 5.0)
for check in diagnose_chain(chain):
    print(f"{check.name:14s} {check.status:20s} {check.detail}")

# crediting the tax instead of charging it breaks submodularity
print()
for check in diagnose_chain(chain, tamper=True):
    if check.name == "submodularity":
        print("tampered:", check.status, "-", check.detail)
        print("first witness (lam1, lam2, t1, t2, margin):", check.witness[0])
