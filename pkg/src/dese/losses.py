"""Negative-sampled edge cross-entropy and the combined training objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmat as dm
from .diffmat import DiffMatrix

DIST_EPS = 1e-12


@dataclass(frozen=True)
class EdgeSample:
    i: np.ndarray
    j: np.ndarray
    label: np.ndarray   # 1.0 for edges, 0.0 for sampled non-edges

    def __len__(self):
        return self.i.size

    @property
    def n_pos(self) -> int:
        return int(self.label.sum())

    def pairs(self) -> list[tuple[int, int, int]]:
        return [(int(a), int(b), int(c)) for a, b, c in zip(self.i, self.j, self.label)]


def _pair_codes(i, j, n):
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    return lo * n + hi


def sample_edges(w, max_pos: int, seed: int) -> EdgeSample:
    """All edges of ``w`` (or ``max_pos`` of them) plus as many sampled non-edges."""
    w = w.values if isinstance(w, DiffMatrix) else np.asarray(w)
    n = w.shape[0]
    rng = np.random.default_rng(seed)
    pu, pv = np.nonzero(np.triu(w != 0, 1))
    n_pairs = n * (n - 1) // 2
    n_neg_avail = n_pairs - pu.size
    if pu.size == 0:
        raise ValueError("sample_edges: graph has no edges")
    if n_neg_avail == 0:
        raise ValueError("sample_edges: complete graph, no negative pairs available")
    n_take = min(pu.size, max_pos, n_neg_avail)
    if n_take < pu.size:
        keep = np.sort(rng.choice(pu.size, size=n_take, replace=False))
        pu, pv = pu[keep], pv[keep]

    if n_neg_avail <= 4 * n_take:
        nu, nv = np.nonzero(np.triu(w == 0, 1))
        pick = np.sort(rng.choice(nu.size, size=n_take, replace=False))
        nu, nv = nu[pick], nv[pick]
    else:
        codes: list[np.ndarray] = []
        seen = np.empty(0, dtype=np.int64)
        while seen.size < n_take:
            batch = 2 * (n_take - seen.size) + 16
            a = rng.integers(0, n, size=batch)
            b = rng.integers(0, n, size=batch)
            ok = (a != b)
            a, b = a[ok], b[ok]
            ok = w[a, b] == 0
            c = _pair_codes(a[ok], b[ok], n)
            # keep first occurrences, in draw order
            _, first = np.unique(c, return_index=True)
            c = c[np.sort(first)]
            c = c[~np.isin(c, seen)]
            seen = np.concatenate([seen, c[: n_take - seen.size]])
        nu, nv = seen // n, seen % n
    i = np.concatenate([pu, nu]).astype(np.intp)
    j = np.concatenate([pv, nv]).astype(np.intp)
    label = np.concatenate([np.ones(n_take), np.zeros(n_take)])
    return EdgeSample(i, j, label)


def ce_loss(embeddings: DiffMatrix, sample: EdgeSample) -> DiffMatrix:
    """Mean over sampled pairs of the binary cross-entropy with p = sigmoid(2 - ||e_i - e_j||)."""
    if len(sample) == 0:
        raise ValueError("ce_loss: empty edge sample")
    dist = dm.sqrt(dm.pair_sq_dist(embeddings, sample.i, sample.j), eps=DIST_EPS)
    logits = 2.0 - dist
    p_edge = dm.sigmoid(logits)
    p_none = dm.sigmoid(-logits)            # 1 - p, without cancellation
    lab = dm.constant(sample.label.reshape(-1, 1))
    ll = lab * dm.log(p_edge) + (1.0 - lab) * dm.log(p_none)
    return dm.scalar_mul(dm.sum_all(ll), -1.0 / len(sample))


def total_loss(se: DiffMatrix, ce: DiffMatrix, lambda_se: float, lambda_ce: float) -> DiffMatrix:
    if lambda_se < 0 or lambda_ce < 0:
        raise ValueError("total_loss: loss coefficients must be non-negative")
    if se.shape != (1, 1) or ce.shape != (1, 1):
        raise dm.ShapeError("total_loss: both terms must be 1x1")
    return dm.scalar_mul(se, lambda_se) + dm.scalar_mul(ce, lambda_ce)
