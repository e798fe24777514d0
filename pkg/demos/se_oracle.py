"""
Soft structural entropy versus the classical tree formula
=========================================================

Small graphs where every number can be checked by hand.
"""
import numpy as np

from dese import diffmat as dm
from dese.entropy import AssignmentStack, EncodingTree, classical_se, soft_se, soft_se_layer

# a triangle: one cluster holding all three nodes costs log2(3) bits,
# all of it at the leaf level
k3 = np.ones((3, 3)) - np.eye(3)
print("K3, one cluster:", classical_se(k3, EncodingTree.single_cluster(3)), "vs log2 3 =", np.log2(3))

# soft version: two clusters, every node split evenly between them
stack = AssignmentStack([np.full((3, 2), 0.5)])
with dm.Tape():
    layers = [soft_se_layer(k3, stack, k).item() for k in (1, 2)]
print("K3, uniform over 2 clusters: layers", np.round(layers, 4), "total", round(sum(layers), 4))

# two triangles joined by nothing
w = np.zeros((6, 6))
for i, j in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]:
    w[i, j] = w[j, i] = 1.0

# with one-hot S the soft value is exactly the classical one
for labels in ([0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 2, 2], [0, 1, 0, 1, 0, 1]):
    tree = EncodingTree.from_partitions(6, [labels])
    with dm.Tape():
        soft = soft_se(w, AssignmentStack([np.eye(max(labels) + 1)[labels]])).item()
    print(f"partition {labels}: classical {classical_se(w, tree):.6f}  soft {soft:.6f}")

# blend the planted partition with the uniform one and watch the entropy rise
planted = np.eye(2)[[0, 0, 0, 1, 1, 1]]
for t in np.linspace(0, 1, 5):
    s = (1 - t) * planted + t * 0.5
    with dm.Tape():
        print(f"  mix {t:.2f}: SE {soft_se(w, AssignmentStack([s])).item():.4f}")

# gradients flow to S, so the assignment itself can be optimized
s = dm.parameter(np.full((6, 2), 0.5) + 0.01 * np.array([[1, -1]] * 3 + [[-1, 1]] * 3))
with dm.Tape():
    dm.backward(soft_se(w, AssignmentStack([s], check=False)))
print("dSE/dS at a near-uniform S:\n", np.round(s.grad, 4))
