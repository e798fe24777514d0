"""Structural entropy of a graph under an encoding tree.

``classical_se`` enumerates tree vertices and evaluates cut/volume ratios
directly.  ``soft_se`` is the differentiable version over a stack of
row-stochastic assignment matrices; on one-hot stacks the two agree.

Levels are indexed root-down: level 0 is the root, level h holds the
leaves (graph nodes).  All entropies are in bits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffmat as dm
from .diffmat import DiffMatrix

LN2 = math.log(2.0)


@dataclass
class EncodingTree:
    """Rooted tree over node subsets; vertex 0 is the root.

    ``leaf_of[i]`` is the leaf vertex holding graph node ``i``; several nodes
    may share one leaf.
    """

    children: dict[int, list[int]]
    leaf_of: list[int]
    height: int
    parent: dict[int, int] = field(init=False)

    def __post_init__(self):
        self.parent = {c: p for p, cs in self.children.items() for c in cs}
        depth = {0: 0}
        stack = [0]
        while stack:
            v = stack.pop()
            for c in self.children.get(v, []):
                depth[c] = depth[v] + 1
                stack.append(c)
        leaves = [v for v in depth if not self.children.get(v)]
        if any(depth[v] != self.height for v in leaves):
            raise ValueError("EncodingTree: every leaf must sit at depth == height")
        if any(v not in depth or self.children.get(v) for v in self.leaf_of):
            raise ValueError("EncodingTree: leaf_of must point at leaf vertices")
        self.depth = depth

    @classmethod
    def from_partitions(cls, n_nodes: int, levels: Sequence[Sequence[int]] = ()) -> "EncodingTree":
        """Tree with singleton leaves and one level per labelling, leaf-most first.

        ``levels[0][i]`` is the cluster of node i; ``levels[1][c]`` the parent of
        cluster c, and so on.  Cluster ids that no child uses are dropped.
        """
        levels = [[int(c) for c in lab] for lab in levels]
        children: dict[int, list[int]] = {0: []}
        leaf_ids = list(range(1, n_nodes + 1))
        current = leaf_ids      # vertex id per position at this level; -1 marks an empty cluster
        next_id = n_nodes + 1
        for j, labels in enumerate(levels):
            if len(labels) != len(current):
                raise ValueError("from_partitions: level sizes do not chain")
            size = len(levels[j + 1]) if j + 1 < len(levels) else max(labels, default=-1) + 1
            vid = {}
            for item, c in zip(current, labels):
                if item == -1:
                    continue
                if c not in vid:
                    vid[c] = next_id
                    children[next_id] = []
                    next_id += 1
                children[vid[c]].append(item)
            current = [vid.get(c, -1) for c in range(size)]
        children[0] = [v for v in current if v != -1]
        return cls(children, leaf_ids, height=len(levels) + 1)

    @classmethod
    def single_cluster(cls, n_nodes: int) -> "EncodingTree":
        """Root -> one cluster -> a singleton leaf per node."""
        return cls.from_partitions(n_nodes, [np.zeros(n_nodes, dtype=np.intp)])

    @classmethod
    def collapsed(cls, n_nodes: int) -> "EncodingTree":
        """Root with a single child that is the one leaf holding every node (SE 0)."""
        return cls({0: [1]}, [1] * n_nodes, height=1)

    def members(self) -> dict[int, np.ndarray]:
        """Node indices under every vertex."""
        out: dict[int, list[int]] = {}
        for node, leaf in enumerate(self.leaf_of):
            v = leaf
            while True:
                out.setdefault(v, []).append(node)
                if v == 0:
                    break
                v = self.parent[v]
        return {v: np.array(m, dtype=np.intp) for v, m in out.items()}


def classical_se(weighted_adj: np.ndarray, tree: EncodingTree) -> float:
    w = np.asarray(weighted_adj, dtype=np.float64)
    deg = w.sum(axis=1)
    vol_g = deg.sum()
    if vol_g <= 0:
        raise ValueError("classical_se: graph volume must be positive")
    members = tree.members()
    vol = {v: deg[m].sum() for v, m in members.items()}
    total = 0.0
    for v, m in members.items():
        if v == 0:
            continue
        inside = np.zeros(len(deg), dtype=bool)
        inside[m] = True
        cut = w[np.ix_(inside, ~inside)].sum()
        if cut == 0:
            continue
        total -= cut / vol_g * math.log2((vol[v] + dm.LOG_EPS) / (vol[tree.parent[v]] + dm.LOG_EPS))
    return total


class AssignmentStack:
    """Row-stochastic assignment matrices, stored leaf-up as [S^h, ..., S^1].

    Pass the learned layers leaf-up (node->cluster first).  The all-ones
    map onto the root is appended unless the last layer already has one
    column.
    """

    def __init__(self, layers: Sequence, n_nodes: int | None = None, check: bool = True):
        mats = [x if isinstance(x, DiffMatrix) else dm.constant(x) for x in layers]
        if not mats:
            if n_nodes is None:
                raise ValueError("AssignmentStack: empty layer list needs n_nodes")
            mats = [dm.constant(np.ones((n_nodes, 1)))]
        elif mats[-1].cols != 1:
            mats.append(dm.constant(np.ones((mats[-1].cols, 1))))
        for lower, upper in zip(mats, mats[1:]):
            if lower.cols != upper.rows:
                raise ValueError(f"AssignmentStack: shapes {lower.shape} and {upper.shape} do not chain")
        if check:
            for s in mats:
                v = s.values
                if np.any(v < 0) or np.max(np.abs(v.sum(axis=1) - 1.0)) > 1e-9:
                    raise ValueError("AssignmentStack: every layer must be row-stochastic")
        self.layers = mats

    @property
    def height(self) -> int:
        return len(self.layers)

    @property
    def n_nodes(self) -> int:
        return self.layers[0].rows

    def S(self, k: int) -> DiffMatrix:
        """Assignment from level k to level k-1."""
        if not 1 <= k <= self.height:
            raise IndexError(f"level {k} outside 1..{self.height}")
        return self.layers[self.height - k]

    def sizes(self) -> list[int]:
        """Vertex count per level, root (level 0) first."""
        return [1] + [self.S(k).rows for k in range(1, self.height + 1)]


def direct_assignment(stack: AssignmentStack, k: int) -> DiffMatrix | None:
    """C^k = S^h S^{h-1} ... S^{k+1}; ``None`` stands for the identity at k = h."""
    h = stack.height
    if not 0 <= k <= h:
        raise IndexError(f"direct_assignment: level {k} outside 0..{h}")
    if k == h:
        return None
    c = stack.S(h)
    for j in range(h - 1, k, -1):
        c = dm.matmul(c, stack.S(j))
    return c


def direct_assignment_matrix(stack: AssignmentStack, k: int) -> np.ndarray:
    c = direct_assignment(stack, k)
    return np.eye(stack.n_nodes) if c is None else c.values


def _as_weights(weighted_adj) -> DiffMatrix:
    return weighted_adj if isinstance(weighted_adj, DiffMatrix) else dm.constant(weighted_adj)


def _volumes(w: DiffMatrix, deg: DiffMatrix, c: DiffMatrix | None):
    """(vol, internal volume) of every vertex at one level, both 1 x N_k."""
    if c is None:
        diag = dm.constant(np.diag(w.values).reshape(1, -1))
        if w.requires_grad:
            eye = dm.constant(np.eye(w.rows))
            diag = dm.sum_cols(w * eye)
        return dm.transpose(deg), diag
    vol = dm.matmul(dm.transpose(deg), c)
    internal = dm.sum_cols(c * dm.matmul(w, c))
    return vol, internal


def soft_se_layer(weighted_adj, stack: AssignmentStack, k: int) -> DiffMatrix:
    h = stack.height
    if not 1 <= k <= h:
        raise IndexError(f"soft_se_layer: level {k} outside 1..{h}")
    w = _as_weights(weighted_adj)
    deg = dm.sum_rows(w)
    vol0 = dm.sum_all(deg)
    if vol0.item() <= 0:
        raise ValueError("soft_se_layer: graph volume must be positive")
    vol_k, internal = _volumes(w, deg, direct_assignment(stack, k))
    cut = vol_k - internal
    c_parent = direct_assignment(stack, k - 1)
    vol_parent = dm.transpose(deg) if c_parent is None else dm.matmul(dm.transpose(deg), c_parent)
    parent_of = dm.matmul(vol_parent, dm.transpose(stack.S(k)))
    ratio_log = dm.log(vol_k) - dm.log(parent_of)
    return dm.scalar_mul(dm.sum_all(cut * ratio_log) / vol0, -1.0 / LN2)


def soft_se(weighted_adj, stack: AssignmentStack) -> DiffMatrix:
    if stack.height < 1:
        raise ValueError("soft_se: empty assignment stack")
    total = soft_se_layer(weighted_adj, stack, 1)
    for k in range(2, stack.height + 1):
        total = total + soft_se_layer(weighted_adj, stack, k)
    return total


def tree_from_hard_stack(stack: AssignmentStack) -> EncodingTree:
    """Encoding tree induced by a one-hot stack (empty clusters dropped)."""
    levels = [np.argmax(stack.S(k).values, axis=1) for k in range(stack.height, 1, -1)]
    return EncodingTree.from_partitions(stack.n_nodes, levels)


def degree_entropy(weighted_adj: np.ndarray) -> float:
    """Shannon entropy (bits) of the stationary degree distribution."""
    d = np.asarray(weighted_adj, dtype=np.float64).sum(axis=1)
    p = d[d > 0] / d.sum()
    return float(-(p * np.log2(p)).sum())
