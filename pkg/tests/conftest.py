import numpy as np
import pytest

from dese.graph_io import GraphDataset, adjacency_from_edges
from dese.trainer import TrainConfig

TRIANGLES = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]


def two_triangles() -> GraphDataset:
    a = adjacency_from_edges(6, np.array(TRIANGLES))
    return GraphDataset(np.eye(6), a, np.array([0, 0, 0, 1, 1, 1]), name="two_triangles")


def k3() -> np.ndarray:
    return np.ones((3, 3)) - np.eye(3)


def small_config(**over) -> TrainConfig:
    """Fast config for plumbing tests: few epochs, narrow embeddings."""
    data = {"epochs": 20, "embed_dim": 8, "ass": {"clusters": [2]}}
    data.update(over)
    return TrainConfig.from_dict(data)


@pytest.fixture
def triangles():
    return two_triangles()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def packaged(name: str):
    """Path of a packaged dataset under $DESE_DATA_DIR, or None."""
    from dese.graph_io import data_root
    root = data_root()
    if root is None or not (root / name / "edges.tsv").exists():
        return None
    return root / name


def require_packaged(name: str):
    path = packaged(name)
    if path is None:
        pytest.skip(f"{name} not available: set DESE_DATA_DIR to a directory containing {name}/ "
                    "(edges.tsv, features.csv, labels.csv)")
    return path
