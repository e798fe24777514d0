"""Full-graph training loop, hard assignment and cluster-count discovery."""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ass, entropy, losses, metrics, sll
from . import diffmat as dm
from .diffmat import DiffMatrix
from .graph_io import GraphDataset

log = logging.getLogger(__name__)

FEATURE_NORMS = ("auto", "none", "row_l2")


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, last_losses: list, reason: str = ""):
        self.epoch = epoch
        self.last_losses = last_losses
        super().__init__(f"training diverged at epoch {epoch}: {reason} "
                         f"(last finite losses: {last_losses})")


@dataclass
class SllConfig:
    k_policy: str = "fixed"
    k: int = 1
    divisor: float = 5.0
    beta_f: float = 0.2
    freeze_after_first: bool = False


@dataclass
class AssConfig:
    depth: int = 1
    clusters: list = field(default_factory=lambda: [7])
    leaky_slope: float = 0.2
    normalize: str = "softmax"      # or "relu": ReLU scores divided by their row sum


@dataclass
class LossConfig:
    lambda_se: float = 0.01
    lambda_ce: float = 5.0
    max_pos_edges: int = 20000


@dataclass
class TrainConfig:
    epochs: int = 600
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.0
    embed_dim: int = 256
    seed: int = 0
    feature_normalize: str = "auto"       # auto: row_l2 for 0/1 features, else none
    early_stop_patience: int = 0          # 0 disables early stopping
    early_stop_min_delta: float = 0.0
    sll: SllConfig = field(default_factory=SllConfig)
    ass: AssConfig = field(default_factory=AssConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.feature_normalize not in FEATURE_NORMS:
            raise ConfigError(f"feature_normalize must be one of {FEATURE_NORMS}")
        if self.ass.normalize not in ("softmax", "relu"):
            raise ConfigError("ass.normalize must be 'softmax' or 'relu'")
        if self.ass.depth < 1:
            raise ConfigError("ass.depth must be >= 1")
        if len(self.ass.clusters) != self.ass.depth:
            raise ConfigError(f"ass.clusters needs one entry per level ({self.ass.depth}), "
                              f"got {self.ass.clusters}")
        if any(int(c) < 1 for c in self.ass.clusters):
            raise ConfigError("every ass.clusters entry must be >= 1")
        if self.loss.lambda_se < 0 or self.loss.lambda_ce < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if self.loss.max_pos_edges < 1:
            raise ConfigError("loss.max_pos_edges must be >= 1")
        if self.sll.beta_f < 0:
            raise ConfigError("sll.beta_f must be non-negative")
        if self.sll.k_policy not in sll.K_POLICIES:
            raise ConfigError(f"sll.k_policy must be one of {sll.K_POLICIES}")
        if self.sll.k < 1:
            raise ConfigError("sll.k must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        subs = {"sll": SllConfig, "ass": AssConfig, "loss": LossConfig}
        kwargs = {}
        names = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            if key in subs:
                sub_names = {f.name for f in dataclasses.fields(subs[key])}
                unknown = set(value) - sub_names
                if unknown:
                    raise ConfigError(f"unknown config keys {sorted(f'{key}.{u}' for u in unknown)}")
                kwargs[key] = subs[key](**value)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.ass.clusters = [int(c) for c in cfg.ass.clusters]
        return cfg


@dataclass
class ModelParams:
    sll: sll.SllParams
    theta0: DiffMatrix
    levels: list

    def named(self):
        out = list(self.sll.named()) + [("theta0", self.theta0)]
        for i, lvl in enumerate(self.levels):
            out.extend(lvl.named(f"ass{i}"))
        return out

    def trainable(self):
        # theta_c only feeds the discrete KNN step, so it never receives gradient
        return [(n, p) for n, p in self.named() if not n.endswith("theta_c")]


def init_params(n_features: int, config: TrainConfig, rng: np.random.Generator) -> ModelParams:
    d = config.embed_dim
    sp = sll.init_sll_params(rng, n_features, d)
    theta0 = dm.parameter(sll.glorot(rng, d, d), "theta0")
    depth = config.ass.depth
    levels = [ass.init_ass_params(rng, d, int(c), with_cluster_mlp=(i < depth - 1))
              for i, c in enumerate(config.ass.clusters)]
    return ModelParams(sp, theta0, levels)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-3, momentum=0.0):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.buf = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        for p, b in zip(self.params, self.buf):
            b *= self.momentum
            b += p.grad
            p.values -= self.lr * b


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    return SGD(params, config.learning_rate, config.momentum)


def normalize_features(x: np.ndarray, mode: str) -> np.ndarray:
    if mode == "auto":
        mode = "row_l2" if np.isin(x, (0.0, 1.0)).all() else "none"
    if mode == "none":
        return x.astype(np.float64, copy=True)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms)


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


@dataclass
class ForwardOutput:
    total: DiffMatrix
    se: DiffMatrix
    ce: DiffMatrix
    assignments: list          # learned S matrices, leaf-up
    leaf_embeddings: DiffMatrix
    weighted: np.ndarray       # fused leaf-level W


class Model:
    """Parameters plus the per-dataset constants one epoch needs."""

    def __init__(self, dataset: GraphDataset, config: TrainConfig, params: ModelParams | None = None):
        self.config = config.validate()
        n = dataset.n_nodes
        if n < 2:
            raise ConfigError("dataset needs at least two nodes")
        if config.ass.clusters[0] > n:
            raise ConfigError(f"ass.clusters[0]={config.ass.clusters[0]} exceeds N={n}")
        for lo, hi in zip(config.ass.clusters, config.ass.clusters[1:]):
            if hi > lo:
                raise ConfigError("ass.clusters must not grow with depth")
        self.dataset = dataset
        self.features = normalize_features(dataset.features, config.feature_normalize)
        self.x = dm.constant(self.features)
        self.a_g = dataset.adjacency
        self.degrees = self.a_g.sum(axis=1)
        self.policy = sll.KPolicy(config.sll.k_policy, config.sll.k, config.sll.divisor)
        self.policy.resolve(self.degrees)     # fail fast on K > N-1
        rng = np.random.default_rng(config.seed)
        self.params = params or init_params(dataset.n_features, config, rng)
        self._frozen_af = None

    def attribute_graph(self, z: np.ndarray, epoch: int) -> np.ndarray:
        if self.config.sll.beta_f == 0.0:
            return np.zeros_like(self.a_g)
        if self._frozen_af is not None:
            return self._frozen_af
        a_f = sll.attribute_graph(self.features, None, self.policy,
                                  seed=epoch_seed(self.config.seed, epoch),
                                  degrees=self.degrees, embedding=z)
        if self.config.sll.freeze_after_first:
            self._frozen_af = a_f
        return a_f

    def forward(self, epoch: int = 0) -> ForwardOutput:
        cfg = self.config
        p = self.params
        z = sll.mlp(self.x, p.sll)
        a_f = self.attribute_graph(z.values, epoch)
        state = ass.make_state(z, self.a_g, a_f, cfg.sll.beta_f)
        # initial embedding: one mean-aggregation GNN pass over the fused graph
        e0 = dm.relu(dm.matmul(ass.mean_aggregator(state.weighted), dm.matmul(z, p.theta0)))
        state = ass.LevelState(e0, state.struct_adj, state.attr_adj, state.weighted)
        leaf_w = state.weighted
        assignments, leaf_h = [], None
        for i, lvl in enumerate(p.levels):
            h = ass.embed(state, lvl.theta1)
            s, _ = ass.soft_assign(state, lvl.theta2, lvl.theta3, cfg.ass.leaky_slope,
                                    cfg.ass.normalize)
            assignments.append(s)
            if leaf_h is None:
                leaf_h = h
            if i + 1 < len(p.levels):
                state = ass.aggregate(state, s, h, lvl.theta_c, cfg.sll.beta_f, self.policy,
                                      seed=epoch_seed(cfg.seed, epoch) + i + 1)
        stack = entropy.AssignmentStack(assignments, check=False)
        se = entropy.soft_se(leaf_w, stack)
        sample = losses.sample_edges(leaf_w.values, cfg.loss.max_pos_edges,
                                     seed=epoch_seed(cfg.seed, epoch))
        ce = losses.ce_loss(leaf_h, sample)
        total = losses.total_loss(se, ce, cfg.loss.lambda_se, cfg.loss.lambda_ce)
        return ForwardOutput(total, se, ce, assignments, leaf_h, leaf_w.values)


def hard_assignment(soft) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest column."""
    s = soft.values if isinstance(soft, DiffMatrix) else np.asarray(soft)
    if s.ndim != 2:
        raise ValueError("hard_assignment: expected an N x c matrix")
    if s.size and np.max(np.abs(s.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("hard_assignment: rows must sum to 1")
    return np.argmax(s, axis=1)


@dataclass
class ClusteringResult:
    hard_labels: np.ndarray
    soft_assignment: np.ndarray
    embeddings: np.ndarray
    loss_trace: list           # (total, se, ce) per epoch
    best_epoch: int
    wall_clock: float
    config: TrainConfig
    metrics: dict | None = None

    @property
    def n_clusters_used(self) -> int:
        return int(np.unique(self.hard_labels).size)


def train(dataset: GraphDataset, config: TrainConfig, callback=None) -> ClusteringResult:
    """Run the epoch loop and return the epoch with the lowest total loss."""
    start = time.perf_counter()
    model = Model(dataset, config)
    trainable = [p for _, p in model.params.trainable()]
    opt = make_optimizer(trainable, config)
    trace: list = []
    best = None
    stale = 0
    for epoch in range(config.epochs):
        dm.zero_grads(trainable)
        try:
            with dm.Tape():
                out = model.forward(epoch)
                values = (out.total.item(), out.se.item(), out.ce.item())
                if not all(np.isfinite(values)):
                    raise DivergenceError(epoch, trace[-3:], "non-finite loss")
                dm.backward(out.total)
        except dm.NonFiniteError as e:
            raise DivergenceError(epoch, trace[-3:], str(e)) from e
        trace.append(values)
        log.debug("epoch %d total %.6f se %.6f ce %.6f", epoch, *values)
        if callback is not None:
            callback(epoch, values)
        improved = best is None or values[0] < best[0] - config.early_stop_min_delta
        if best is None or values[0] < best[0]:
            best = (values[0], epoch, out.assignments[0].values.copy(),
                    out.leaf_embeddings.values.copy())
        stale = 0 if improved else stale + 1
        if config.early_stop_patience and stale >= config.early_stop_patience:
            log.info("early stop at epoch %d", epoch)
            break
        opt.step()
    _, best_epoch, soft, emb = best
    result = ClusteringResult(hard_assignment(soft), soft, emb, trace, best_epoch,
                              time.perf_counter() - start, config)
    if dataset.labels is not None:
        result.metrics = metrics.evaluate(result.hard_labels, dataset.labels)
    log.info("trained %s: best epoch %d, %d clusters, %.1fs", dataset.name, best_epoch,
             result.n_clusters_used, result.wall_clock)
    return result


def with_clusters(config: TrainConfig, c: int) -> TrainConfig:
    cfg = TrainConfig.from_dict(config.to_dict())
    cfg.ass.clusters = [int(c)] + [min(int(x), int(c)) for x in cfg.ass.clusters[1:]]
    return cfg


@dataclass
class DiscoveryRound:
    round: int
    c_in: int
    clusters_out: int
    nmi: float | None


def discover_cluster_count(dataset: GraphDataset, config: TrainConfig, c_start: int,
                           max_rounds: int = 20):
    """Retrain with c set to the number of clusters actually used until it stops changing.

    Returns ``(c_final, rounds, converged)``.
    """
    if c_start < 1:
        raise ConfigError("c_start must be >= 1")
    c = min(int(c_start), dataset.n_nodes)
    rounds: list[DiscoveryRound] = []
    for r in range(1, max_rounds + 1):
        res = train(dataset, with_clusters(config, c))
        used = res.n_clusters_used
        nmi = res.metrics["nmi"] if res.metrics else None
        rounds.append(DiscoveryRound(r, c, used, nmi))
        log.info("discovery round %d: c=%d -> %d clusters", r, c, used)
        if used == c:
            return c, rounds, True
        c = used
    return c, rounds, False


# checkpoint: 8-byte little-endian header length, JSON header, then '<f8' payload

def save_checkpoint(params: ModelParams, path) -> None:
    named = params.named()
    header = json.dumps({"format": "dese-ckpt-1",
                         "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named]})
    raw = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, p in named:
            fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def load_checkpoint(params: ModelParams, path) -> ModelParams:
    data = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    targets = dict(params.named())
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        target = targets.get(spec["name"])
        if target is None or target.shape != shape:
            raise ValueError(f"checkpoint tensor {spec['name']} {shape} does not match the model")
        target.values[...] = arr
    return params
