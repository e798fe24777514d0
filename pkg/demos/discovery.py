"""
Finding the number of clusters
==============================

Start with too many clusters, keep only the ones the model actually
uses, retrain, and stop when the count stops changing.
"""
import sys

from dese import TrainConfig, discover_cluster_count, generate_sbm

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
ds = generate_sbm([50, 50, 50], p_in=0.3, p_out=0.02, seed=0)

c, rounds, converged = discover_cluster_count(ds, TrainConfig(seed=seed), c_start=10)
for r in rounds:
    print(f"round {r.round}: c={r.c_in:3d} -> {r.clusters_out} clusters used, nmi {r.nmi:.3f}")
print("final c =", c, "" if converged else "(hit the round cap)")

# The planted answer is 3.  Runs often stop at 4-5 instead: on a single
# random instance the entropy objective can prefer cutting a dense block
# along a sparse bisection.  Compare the two-level entropy of both
# partitions with dese.entropy.classical_se to see it.
