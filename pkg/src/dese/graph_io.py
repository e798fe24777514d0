"""Graph datasets: on-disk format, degree vectors and planted-partition graphs.

A dataset directory holds

* ``edges.tsv``    one ``u<TAB>v`` pair per line, 0-based ids
* ``features.csv`` N rows of comma-separated floats, no header
* ``labels.csv``   optional, N rows with one integer each
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GraphDataset:
    features: np.ndarray            # N x f
    adjacency: np.ndarray           # N x N, symmetric 0/1, zero diagonal
    labels: np.ndarray | None = None
    name: str = "graph"

    def __post_init__(self):
        a, x = self.adjacency, self.features
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError(f"adjacency must be square, got {a.shape}")
        if x.ndim != 2 or x.shape[0] != a.shape[0] or x.shape[1] < 1:
            raise DataError(f"features shape {x.shape} does not match {a.shape[0]} nodes")
        if np.isnan(x).any():
            raise DataError("features contain NaN")
        if not np.array_equal(a, a.T):
            raise DataError("adjacency is not symmetric")
        if np.any(np.diag(a) != 0):
            raise DataError("adjacency has self-loops")
        if not np.all((a == 0) | (a == 1)):
            raise DataError("adjacency entries must be 0 or 1")
        if self.labels is not None:
            lab = self.labels
            if lab.shape != (a.shape[0],):
                raise DataError(f"labels shape {lab.shape} does not match {a.shape[0]} nodes")
            if lab.size and not np.array_equal(np.unique(lab), np.arange(lab.max() + 1)):
                raise DataError("label ids must be contiguous 0..c-1")

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency, 1)))

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int | None:
        return None if self.labels is None else int(self.labels.max()) + 1

    def edge_list(self) -> np.ndarray:
        """Unordered edges as an (M, 2) array with u < v, sorted."""
        u, v = np.nonzero(np.triu(self.adjacency, 1))
        return np.stack([u, v], axis=1)

    def n_isolated(self) -> int:
        return int(np.count_nonzero(self.adjacency.sum(axis=1) == 0))


def adjacency_from_edges(n: int, edges: np.ndarray) -> np.ndarray:
    a = np.zeros((n, n))
    if len(edges):
        edges = np.asarray(edges, dtype=np.intp)
        a[edges[:, 0], edges[:, 1]] = 1.0
        a[edges[:, 1], edges[:, 0]] = 1.0
    np.fill_diagonal(a, 0.0)
    return a


def _read_rows(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def load_dataset(dir_path) -> GraphDataset:
    d = Path(dir_path)
    if not (d / "edges.tsv").exists() or not (d / "features.csv").exists():
        raise DataError(f"{d}: expected edges.tsv and features.csv")
    try:
        features = np.loadtxt(d / "features.csv", delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise DataError(f"{d / 'features.csv'}: {e}") from None
    n = features.shape[0]

    labels = None
    if (d / "labels.csv").exists():
        rows = _read_rows(d / "labels.csv")
        if len(rows) != n:
            raise DataError(f"labels.csv has {len(rows)} rows but features.csv has {n}")
        try:
            labels = np.array([int(r) for r in rows], dtype=np.int64)
        except ValueError as e:
            raise DataError(f"labels.csv: {e}") from None

    pairs, self_loops = [], 0
    with open(d / "edges.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise DataError(f"edges.tsv line {lineno}: expected two ids, got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataError(f"edges.tsv line {lineno}: ids must be integers, got {line!r}") from None
            if not (0 <= u < n and 0 <= v < n):
                raise DataError(f"edges.tsv line {lineno}: node id out of range [0, {n})")
            if u == v:
                self_loops += 1
                continue
            pairs.append((min(u, v), max(u, v)))
    if self_loops:
        log.warning("%s: dropped %d self-loops", d, self_loops)
    edges = np.array(sorted(set(pairs)), dtype=np.intp).reshape(-1, 2)
    return GraphDataset(features, adjacency_from_edges(n, edges), labels, name=d.name)


def save_dataset(ds: GraphDataset, dir_path) -> Path:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, v in ds.edge_list():
            fh.write(f"{u}\t{v}\n")
    # repr round-trips float64 exactly
    with open(d / "features.csv", "w", encoding="utf-8", newline="\n") as fh:
        for row in ds.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    if ds.labels is not None:
        with open(d / "labels.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{int(y)}\n" for y in ds.labels)
    return d


def from_planetoid_raw(content_path, cites_path, name: str = "cora") -> GraphDataset:
    """Convert the LINQS ``<name>.content`` / ``<name>.cites`` pair.

    Citations to papers missing from the content file are dropped, as are
    self-citations; classes are numbered in sorted order of their names.
    """
    ids, feats, classes = [], [], []
    with open(content_path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            feats.append([float(x) for x in parts[1:-1]])
            classes.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    names = sorted(set(classes))
    labels = np.array([names.index(c) for c in classes], dtype=np.int64)
    pairs = set()
    with open(cites_path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2 or parts[0] not in index or parts[1] not in index:
                continue
            u, v = index[parts[0]], index[parts[1]]
            if u != v:
                pairs.add((min(u, v), max(u, v)))
    edges = np.array(sorted(pairs), dtype=np.intp).reshape(-1, 2)
    return GraphDataset(np.array(feats), adjacency_from_edges(len(ids), edges), labels, name=name)


def degree_vector(weighted_adj: np.ndarray) -> np.ndarray:
    w = np.asarray(weighted_adj, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DataError(f"degree_vector: expected a square matrix, got {w.shape}")
    if np.max(np.abs(w - w.T), initial=0.0) > 1e-9:
        raise DataError("degree_vector: weighted adjacency is not symmetric")
    if np.any(w < 0):
        raise DataError("degree_vector: negative weights")
    return w.sum(axis=1)


def generate_sbm(block_sizes, p_in: float, p_out: float, feature_dim: int = 32,
                 feature_noise: float = 0.1, seed: int = 0) -> GraphDataset:
    """Planted-partition graph with block-indicator features.

    Feature column j of a node in block b is 1 when ``j % n_blocks == b``,
    so the indicator is tiled across ``feature_dim`` columns; i.i.d.
    Gaussian noise of scale ``feature_noise`` is added on top.
    """
    sizes = [int(s) for s in block_sizes]
    if not sizes or min(sizes) < 1:
        raise DataError("generate_sbm: block_sizes must be a nonempty list of positive sizes")
    if not (0.0 <= p_out < p_in <= 1.0):
        raise DataError(f"generate_sbm: need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if feature_dim < 1:
        raise DataError("generate_sbm: feature_dim must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = labels.size
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draw = rng.random((n, n))
    upper = np.triu(draw < prob, 1)
    adj = (upper | upper.T).astype(np.float64)
    cols = np.arange(feature_dim)
    features = (cols[None, :] % len(sizes) == labels[:, None]).astype(np.float64)
    features += feature_noise * rng.standard_normal((n, feature_dim))
    return GraphDataset(features, adj, labels.astype(np.int64),
                        name=f"sbm_{'-'.join(map(str, sizes))}")


def expected_sbm_edges(block_sizes, p_in: float, p_out: float) -> tuple[float, float]:
    """Mean and variance of the SBM edge count."""
    sizes = np.asarray(block_sizes, dtype=np.float64)
    n = sizes.sum()
    n_in = float(np.sum(sizes * (sizes - 1) / 2))
    n_out = n * (n - 1) / 2 - n_in
    mean = n_in * p_in + n_out * p_out
    var = n_in * p_in * (1 - p_in) + n_out * p_out * (1 - p_out)
    return mean, var


def data_root() -> Path | None:
    """Directory holding packaged datasets (``$DESE_DATA_DIR``), if configured."""
    root = os.environ.get("DESE_DATA_DIR")
    return Path(root) if root else None
