"""Deep structural-entropy graph clustering on dense numpy matrices."""

from .diffmat import DiffMatrix, Tape, backward, constant, finite_diff_check, parameter
from .entropy import AssignmentStack, EncodingTree, classical_se, soft_se
from .graph_io import DataError, GraphDataset, generate_sbm, load_dataset, save_dataset
from .metrics import evaluate
from .trainer import (ClusteringResult, ConfigError, DivergenceError, TrainConfig,
                      discover_cluster_count, train)

__version__ = "0.1.0"

__all__ = [
    "DiffMatrix", "Tape", "backward", "constant", "parameter", "finite_diff_check",
    "AssignmentStack", "EncodingTree", "classical_se", "soft_se",
    "DataError", "GraphDataset", "generate_sbm", "load_dataset", "save_dataset",
    "evaluate",
    "ClusteringResult", "ConfigError", "DivergenceError", "TrainConfig",
    "discover_cluster_count", "train",
]
