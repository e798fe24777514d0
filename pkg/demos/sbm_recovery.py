"""
Recovering a planted partition
==============================

Three blocks of 50 nodes, dense inside (p=0.3), sparse across (p=0.02).
No labels are used in training; they only score the result.
"""
import numpy as np

from dese import TrainConfig, generate_sbm, train
from dese.metrics import contingency

ds = generate_sbm([50, 50, 50], p_in=0.3, p_out=0.02, feature_noise=0.1, seed=0)
print(ds.name, ds.n_nodes, "nodes", ds.n_edges, "edges")

# defaults everywhere except the number of clusters
cfg = TrainConfig.from_dict({"ass": {"clusters": [3]}, "seed": 1})

# print the loss every 100 epochs
def show(epoch, losses):
    if epoch % 100 == 0:
        print(f"epoch {epoch:4d}  total {losses[0]:.4f}  se {losses[1]:.4f}  ce {losses[2]:.4f}")

res = train(ds, cfg, callback=show)
print("best epoch", res.best_epoch, "clusters used", res.n_clusters_used)
print({k: round(v, 4) for k, v in res.metrics.items() if isinstance(v, float)})

# rows are true blocks, columns predicted clusters
print(contingency(res.hard_labels, ds.labels).to_csv())

# how sure is the model? mean of the largest soft-assignment entry per node
print("mean max assignment probability:", np.round(res.soft_assignment.max(axis=1).mean(), 3))
