"""
Delay and blocking with finite buffers
======================================

p = 0.8 and 20 places per station: the network is overloaded on purpose, so
arrivals are turned away when every buffer is full.  The horizon grows with
the number of stations.
"""
from whittle_assoc.scenarios import delay_suite
from whittle_assoc.sim import run_replicates

print(f"{'K':>2}  {'policy':10s} {'delay':>8} {'blocking':>9}")
for sc in delay_suite(n_seeds=5):
    summary = run_replicates(sc.sim_config(), sc.n_seeds, sc.policy_objects())
    for name in sorted(summary.results, key=lambda n: summary.mean(n, "avg_delay")):
        print(f"{sc.K:2d}  {name:10s} {summary.mean(name, 'avg_delay'):8.2f} "
              f"{summary.mean(name, 'blocking_prob'):9.5f}")
    print()

# delays count the arrival slot; subtract one per user for the other convention
run0 = summary.results["whittle"][0]
print("K=6 whittle, seed 0: delay", round(run0.avg_delay, 3),
      "exclusive", round(run0.avg_delay_exclusive, 3), "conserves:", run0.conserves())
