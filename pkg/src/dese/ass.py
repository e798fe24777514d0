"""Clustering assignment layer: embedding learner, attention assignment, aggregator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmat as dm
from . import sll
from .diffmat import DiffMatrix

ATTN_EPS = 1e-12


@dataclass
class AssParams:
    theta1: DiffMatrix              # d x d, embedding transform
    theta2: DiffMatrix              # d x c, assignment transform
    theta3: DiffMatrix              # 2d x 1, attention scorer
    theta_c: DiffMatrix | None = None   # d x d, cluster MLP for the next level's KNN graph

    @property
    def n_clusters(self) -> int:
        return self.theta2.cols

    def named(self, prefix: str = "ass"):
        out = [(f"{prefix}.theta1", self.theta1), (f"{prefix}.theta2", self.theta2),
               (f"{prefix}.theta3", self.theta3)]
        if self.theta_c is not None:
            out.append((f"{prefix}.theta_c", self.theta_c))
        return out


def init_ass_params(rng: np.random.Generator, dim: int, n_clusters: int,
                    with_cluster_mlp: bool = False) -> AssParams:
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    return AssParams(
        dm.parameter(sll.glorot(rng, dim, dim)),
        dm.parameter(sll.glorot(rng, dim, n_clusters)),
        dm.parameter(sll.glorot(rng, 2 * dim, 1)),
        dm.parameter(sll.glorot(rng, dim, dim)) if with_cluster_mlp else None,
    )


@dataclass
class LevelState:
    """Graph at one level of the hierarchy.

    ``struct_adj`` and ``weighted`` are DiffMatrix because above the leaf
    level they depend on the learned assignment.
    """

    embeddings: DiffMatrix
    struct_adj: DiffMatrix
    attr_adj: np.ndarray
    weighted: DiffMatrix

    @property
    def n(self) -> int:
        return self.embeddings.rows


def make_state(embeddings, struct_adj, attr_adj, beta_f: float) -> LevelState:
    a_g = struct_adj if isinstance(struct_adj, DiffMatrix) else dm.constant(struct_adj)
    a_f = np.asarray(attr_adj, dtype=np.float64)
    if a_g.tape is None and not a_g.requires_grad:
        w = dm.constant(sll.fuse(a_g.values, a_f, beta_f))
    else:
        w = dm.add(a_g, dm.constant(beta_f * a_f))
    emb = embeddings if isinstance(embeddings, DiffMatrix) else dm.constant(embeddings)
    return LevelState(emb, a_g, a_f, w)


def mean_aggregator(w: DiffMatrix) -> DiffMatrix:
    """W with each row divided by its sum; zero rows stay zero."""
    if w.tape is None and not w.requires_grad:
        s = w.values.sum(axis=1, keepdims=True)
        return dm.constant(w.values / np.where(s == 0.0, 1.0, s))
    return dm.row_normalize(w, zero_rows="keep")


def embed(state: LevelState, theta1: DiffMatrix) -> DiffMatrix:
    if state.embeddings.cols != theta1.rows:
        raise dm.ShapeError(f"embed: embeddings {state.embeddings.shape} vs theta1 {theta1.shape}")
    w_hat = mean_aggregator(state.weighted)
    return dm.relu(dm.matmul(w_hat, dm.matmul(state.embeddings, theta1)))


def attention(state: LevelState, theta3: DiffMatrix, slope: float = 0.2) -> DiffMatrix:
    """Gamma_ij = LeakyReLU([e_i || e_j] theta3) normalized over the neighbours of i."""
    e = state.embeddings
    d = e.cols
    if theta3.shape != (2 * d, 1):
        raise dm.ShapeError(f"attention: theta3 {theta3.shape} vs embedding dim {d}")
    # split the scorer: [e_i || e_j] theta3 = e_i theta3[:d] + e_j theta3[d:]
    top = dm.constant(np.vstack([np.eye(d), np.zeros((d, d))]))
    bottom = dm.constant(np.vstack([np.zeros((d, d)), np.eye(d)]))
    src = dm.matmul(e, dm.matmul(top.T, theta3))          # n x 1
    dst = dm.matmul(e, dm.matmul(bottom.T, theta3))       # n x 1
    scores = dm.leaky_relu(src + dm.transpose(dst), slope)   # n x n via broadcasting
    mask = dm.constant((state.weighted.values != 0).astype(np.float64))
    return dm.row_normalize(scores * mask, eps=ATTN_EPS, zero_rows="keep")


def soft_assign(state: LevelState, theta2: DiffMatrix, theta3: DiffMatrix,
                slope: float = 0.2, normalize: str = "softmax") -> tuple[DiffMatrix, DiffMatrix]:
    c = theta2.cols
    if c > state.n:
        raise ValueError(f"soft_assign: {c} clusters exceed {state.n} vertices")
    gamma = attention(state, theta3, slope)
    agg = dm.matmul(gamma * state.weighted, dm.matmul(state.embeddings, theta2))
    if normalize == "softmax":
        s = dm.row_softmax(agg)
    elif normalize == "relu":
        # ReLU then divide by the row sum; all-zero rows become uniform
        s = dm.row_normalize(dm.relu(agg), zero_rows="uniform")
    else:
        raise ValueError(f"soft_assign: unknown normalization {normalize!r}")
    return s, gamma


def aggregate(state: LevelState, s: DiffMatrix, h: DiffMatrix, theta_c: DiffMatrix | None,
              beta_f: float, policy: sll.KPolicy | None = None, seed: int = 0) -> LevelState:
    """Lift the graph one level: E_c = S^T H, A_g' = S^T A_g S (zero diagonal)."""
    policy = policy or sll.KPolicy()
    e_c = dm.matmul(dm.transpose(s), h)
    lifted = dm.matmul(dm.matmul(dm.transpose(s), state.struct_adj), s)
    off_diag = dm.constant(1.0 - np.eye(s.cols))
    a_g = lifted * off_diag
    n_c = s.cols
    if n_c < 2:
        a_f = np.zeros((n_c, n_c))
    else:
        z = e_c.values if theta_c is None else e_c.values @ theta_c.values
        degrees = a_g.values.sum(axis=1)
        ks_policy = policy
        if policy.kind in ("fixed", "random") and policy.k > n_c - 1:
            ks_policy = sll.KPolicy(policy.kind, n_c - 1, policy.divisor)
        a_f = sll.attribute_graph(z, None, ks_policy, seed=seed, degrees=degrees, embedding=z)
    w = dm.add(a_g, dm.constant(beta_f * a_f))
    return LevelState(e_c, a_g, a_f, w)
