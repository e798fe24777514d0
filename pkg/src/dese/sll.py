"""Attribute-graph construction: MLP embedding, exact KNN, symmetrize, fuse."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffmat as dm
from .diffmat import DiffMatrix

K_POLICIES = ("fixed", "deg_div", "deg_sqrt", "deg_log", "deg_pow", "random")
_EPS = 1e-6


@dataclass
class SllParams:
    """Two-layer MLP f -> d -> d with a ReLU in between."""

    w1: DiffMatrix
    b1: DiffMatrix
    w2: DiffMatrix
    b2: DiffMatrix

    def named(self):
        return [("sll.w1", self.w1), ("sll.b1", self.b1), ("sll.w2", self.w2), ("sll.b2", self.b2)]


def mlp(x, params: SllParams) -> DiffMatrix:
    hidden = dm.relu(dm.matmul(x, params.w1) + params.b1)
    return dm.matmul(hidden, params.w2) + params.b2


@dataclass(frozen=True)
class KPolicy:
    kind: str = "fixed"
    k: int = 1
    divisor: float = 5.0

    def __post_init__(self):
        if self.kind not in K_POLICIES:
            raise ValueError(f"unknown K policy {self.kind!r}; choose from {K_POLICIES}")

    def resolve(self, degrees: np.ndarray) -> np.ndarray:
        """Per-node neighbour counts, clipped to [1, N-1]."""
        deg = np.asarray(degrees, dtype=np.float64)
        n = deg.size
        if self.kind in ("fixed", "random"):
            if self.k > n - 1:
                raise ValueError(f"K={self.k} exceeds N-1={n - 1}")
            ks = np.full(n, self.k, dtype=np.intp)
        elif self.kind == "deg_div":
            ks = np.ceil(deg / self.divisor + _EPS)
        elif self.kind == "deg_sqrt":
            ks = np.ceil(np.sqrt(deg) + _EPS)
        elif self.kind == "deg_log":
            ks = np.ceil(np.log2(deg + 1.0) + _EPS)
        else:
            ks = np.floor(np.power(deg, 1.0 / (deg + 1.0)))
        return np.clip(np.asarray(ks, dtype=np.intp), 1, max(n - 1, 1))


def pairwise_sq_distances(z: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", z, z)
    d = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.maximum(d, 0.0, out=d)
    d = (d + d.T) / 2.0
    # exact zeros between duplicate rows keep lowest-index tie-breaking exact
    _, inverse = np.unique(z, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if inverse.max() + 1 < len(z):
        d[inverse[:, None] == inverse[None, :]] = 0.0
    return d


def knn_select(z: np.ndarray, ks) -> np.ndarray:
    """Directed 0/1 selection matrix: row i marks the ks[i] nearest other nodes.

    Ties are broken by the lower node index.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    ks = np.broadcast_to(np.asarray(ks, dtype=np.intp), (n,))
    if n < 2:
        raise ValueError("knn_select: need at least two nodes")
    if ks.max() > n - 1 or ks.min() < 1:
        raise ValueError(f"knn_select: K must lie in [1, {n - 1}]")
    d = pairwise_sq_distances(z)
    np.fill_diagonal(d, np.inf)
    sel = np.zeros((n, n))
    if np.all(ks == ks[0]):
        k = int(ks[0])
        kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
        cand = d <= kth
        simple = cand.sum(axis=1) == k
        sel[simple] = cand[simple]
        rows = np.flatnonzero(~simple)
    else:
        rows = np.arange(n)
    for i in rows:
        order = np.argsort(d[i], kind="stable")[: ks[i]]
        sel[i, order] = 1.0
    return sel


def random_select(n: int, ks, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ks = np.broadcast_to(np.asarray(ks, dtype=np.intp), (n,))
    sel = np.zeros((n, n))
    for i in range(n):
        others = np.delete(np.arange(n), i)
        sel[i, rng.choice(others, size=int(ks[i]), replace=False)] = 1.0
    return sel


def symmetrize(selection: np.ndarray) -> np.ndarray:
    return (selection + selection.T) / 2.0


def attribute_graph(features, params: SllParams | None, policy: KPolicy,
                    seed: int = 0, degrees: np.ndarray | None = None,
                    embedding: np.ndarray | None = None) -> np.ndarray:
    """Symmetric KNN graph with entries in {0, 0.5, 1} and a zero diagonal.

    ``params=None`` runs KNN on the inputs directly.  A precomputed
    ``embedding`` skips the MLP forward.
    """
    x = features.values if isinstance(features, DiffMatrix) else np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("attribute_graph: need at least two nodes")
    if degrees is None:
        degrees = np.zeros(n)
    ks = policy.resolve(degrees)
    if policy.kind == "random":
        return symmetrize(random_select(n, ks, seed))
    if embedding is None:
        if params is None:
            embedding = x
        else:
            with dm.no_record():
                embedding = mlp(dm.constant(x), params).values
    return symmetrize(knn_select(embedding, ks))


def fuse(a_g, a_f, beta_f: float):
    """W = A_g + beta_f * A_f; works on arrays or on DiffMatrix inputs."""
    if beta_f < 0:
        raise ValueError("fuse: beta_f must be non-negative")
    if isinstance(a_g, DiffMatrix) or isinstance(a_f, DiffMatrix):
        if a_g.shape != a_f.shape:
            raise dm.ShapeError(f"fuse: shapes {a_g.shape} and {a_f.shape} differ")
        return dm.add(a_g, dm.scalar_mul(a_f, beta_f))
    a_g, a_f = np.asarray(a_g, dtype=np.float64), np.asarray(a_f, dtype=np.float64)
    if a_g.shape != a_f.shape:
        raise dm.ShapeError(f"fuse: shapes {a_g.shape} and {a_f.shape} differ")
    return a_g + beta_f * a_f


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_sll_params(rng: np.random.Generator, n_features: int, dim: int) -> SllParams:
    return SllParams(
        dm.parameter(glorot(rng, n_features, dim), "sll.w1"),
        dm.parameter(np.zeros((1, dim)), "sll.b1"),
        dm.parameter(glorot(rng, dim, dim), "sll.w2"),
        dm.parameter(np.zeros((1, dim)), "sll.b2"),
    )
