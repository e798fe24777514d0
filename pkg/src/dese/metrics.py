"""Clustering quality: NMI, ARI, matched accuracy and macro-F1."""
from __future__ import annotations

import io
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

NMI_NORMS = ("arithmetic", "max", "sqrt", "min")
_EXACT_TIEBREAK_MAX = 16


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray          # c_true x c_pred
    truth_ids: np.ndarray
    pred_ids: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def truth_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def pred_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("truth\\pred," + ",".join(str(p) for p in self.pred_ids) + "\n")
        for t, row in zip(self.truth_ids, self.counts):
            buf.write(f"{t}," + ",".join(str(int(x)) for x in row) + "\n")
        return buf.getvalue()


def contingency(pred, truth) -> ContingencyTable:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: pred {pred.shape} vs truth {truth.shape}")
    t_ids, t_idx = np.unique(truth, return_inverse=True)
    p_ids, p_idx = np.unique(pred, return_inverse=True)
    counts = np.zeros((t_ids.size, p_ids.size), dtype=np.int64)
    np.add.at(counts, (t_idx.reshape(-1), p_idx.reshape(-1)), 1)
    return ContingencyTable(counts, t_ids, p_ids)


def _entropy(sizes: np.ndarray) -> float:
    p = sizes[sizes > 0] / sizes.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth, norm: str = "arithmetic") -> float:
    table = contingency(pred, truth)
    n = table.total
    c = table.counts.astype(np.float64)
    h_t, h_p = _entropy(table.truth_sizes), _entropy(table.pred_sizes)
    if h_t == 0.0 and h_p == 0.0:
        return 1.0
    nz = c > 0
    outer = np.outer(table.truth_sizes, table.pred_sizes).astype(np.float64)
    mi = float((c[nz] / n * np.log(c[nz] * n / outer[nz])).sum())
    if norm == "arithmetic":
        denom = (h_t + h_p) / 2.0
    elif norm == "max":
        denom = max(h_t, h_p)
    elif norm == "sqrt":
        denom = np.sqrt(h_t * h_p)
    elif norm == "min":
        denom = min(h_t, h_p)
    else:
        raise ValueError(f"unknown NMI normalization {norm!r}")
    if denom == 0.0:
        return 0.0
    return float(min(max(mi / denom, 0.0), 1.0))


def _pairs(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def ari(pred, truth) -> float:
    table = contingency(pred, truth)
    # exact integer pair counts
    sum_cells = int(_pairs(table.counts).sum())
    sum_t = int(_pairs(table.truth_sizes).sum())
    sum_p = int(_pairs(table.pred_sizes).sum())
    total_pairs = table.total * (table.total - 1) // 2
    expected = sum_p * sum_t / total_pairs if total_pairs else 0.0
    max_index = (sum_p + sum_t) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def _padded(counts: np.ndarray) -> np.ndarray:
    size = max(counts.shape)
    out = np.zeros((size, size), dtype=counts.dtype)
    out[: counts.shape[0], : counts.shape[1]] = counts
    return out


def _best_value(square: np.ndarray) -> float:
    r, c = linear_sum_assignment(square, maximize=True)
    return float(square[r, c].sum())


def _match_weights(table: ContingencyTable) -> np.ndarray:
    """Pred x truth weights: matched count first, pair F1 as a tie-breaker.

    Pair F1 terms sum to less than size + 1, so they can only decide
    between matchings with equal counts.  Without them macro-F1 would
    depend on how tied clusters happen to be labelled.
    """
    counts = table.counts.T.astype(np.float64)
    sizes = table.pred_sizes[:, None] + table.truth_sizes[None, :]
    pair_f1 = 2.0 * counts / sizes
    square = _padded(counts)
    scale = square.shape[0] + 1.0
    out = square * scale
    out[: counts.shape[0], : counts.shape[1]] += pair_f1
    return out


def hungarian_match(table: ContingencyTable) -> dict:
    """Optimal one-to-one map from predicted cluster ids to truth class ids.

    Maximizes the matched count, then the summed pair F1.  Unmatched
    predicted clusters are absent from the result.  Remaining ties go to
    the lexicographically smallest matching (over predicted clusters in
    sorted order) for tables up to 16 on a side.
    """
    n_t, n_p = table.counts.shape
    # rows = predicted clusters, cols = truth classes
    square = _match_weights(table)
    size = square.shape[0]
    if size <= _EXACT_TIEBREAK_MAX:
        best = _best_value(square)
        tol = 1e-9 * max(1.0, best)
        fixed: dict[int, int] = {}
        free_rows, free_cols = list(range(size)), list(range(size))
        gained = 0.0
        for r in range(size):
            free_rows.remove(r)
            for c in list(free_cols):
                rest_cols = [x for x in free_cols if x != c]
                rest = _best_value(square[np.ix_(free_rows, rest_cols)]) if free_rows else 0.0
                if gained + square[r, c] + rest >= best - tol:
                    fixed[r] = c
                    gained += square[r, c]
                    free_cols.remove(c)
                    break
        assignment = fixed
    else:
        rows, cols = linear_sum_assignment(square, maximize=True)
        assignment = dict(zip(rows.tolist(), cols.tolist()))
    return {table.pred_ids[r].item(): table.truth_ids[c].item()
            for r, c in assignment.items() if r < n_p and c < n_t}


def _matched_counts(table: ContingencyTable, mapping: dict):
    t_pos = {t.item(): i for i, t in enumerate(table.truth_ids)}
    p_pos = {p.item(): j for j, p in enumerate(table.pred_ids)}
    return {t: int(table.counts[t_pos[t], p_pos[p]]) for p, t in mapping.items()}, t_pos, p_pos


def accuracy(pred, truth) -> float:
    table = contingency(pred, truth)
    mapping = hungarian_match(table)
    hits, _, _ = _matched_counts(table, mapping)
    return sum(hits.values()) / table.total


def macro_f1(pred, truth) -> float:
    table = contingency(pred, truth)
    mapping = hungarian_match(table)
    hits, t_pos, p_pos = _matched_counts(table, mapping)
    inverse = {t: p for p, t in mapping.items()}
    scores = []
    for t, ti in t_pos.items():
        if t not in inverse:
            scores.append(0.0)
            continue
        tp = hits[t]
        precision = tp / table.pred_sizes[p_pos[inverse[t]]]
        recall = tp / table.truth_sizes[ti]
        scores.append(0.0 if tp == 0 else 2 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def evaluate(pred, truth, nmi_norm: str = "arithmetic") -> dict:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: pred {pred.shape} vs truth {truth.shape}")
    n_pred, n_true = np.unique(pred).size, np.unique(truth).size
    return {
        "nmi": nmi(pred, truth, nmi_norm),
        "ari": ari(pred, truth),
        "acc": accuracy(pred, truth),
        "f1": macro_f1(pred, truth),
        "n_pred_clusters": int(n_pred),
        "n_true_clusters": int(n_true),
        "cluster_count_match": bool(n_pred == n_true),
    }


# brute-force references, kept beside the fast paths for the verify command

def ari_pairs_bruteforce(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    a = b = c = d = 0
    for x, y in itertools.combinations(range(pred.size), 2):
        same_p, same_t = pred[x] == pred[y], truth[x] == truth[y]
        if same_p and same_t:
            a += 1
        elif same_p:
            b += 1
        elif same_t:
            c += 1
        else:
            d += 1
    total = a + b + c + d
    expected = (a + b) * (a + c) / total if total else 0.0
    max_index = ((a + b) + (a + c)) / 2.0
    if max_index == expected:
        return 1.0
    return (a - expected) / (max_index - expected)


def acc_bruteforce(pred, truth) -> float:
    table = contingency(pred, truth)
    sq = _padded(table.counts.T)
    best = max(sum(sq[r, perm[r]] for r in range(sq.shape[0]))
               for perm in itertools.permutations(range(sq.shape[0])))
    return best / table.total
