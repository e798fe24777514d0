"""Fast self-checks: hard-assignment SE equivalence, gradients, metric oracles.

Every check looks its collaborators up through module attributes at call
time, so a monkeypatched primitive or backward rule is actually exercised.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import diffmat as dm
from . import entropy, graph_io, metrics, trainer


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} {self.detail}  ({self.seconds:.2f}s)"


def random_graph(rng: np.random.Generator, n: int, p: float = 0.5) -> np.ndarray:
    upper = np.triu(rng.random((n, n)) < p, 1)
    return (upper | upper.T).astype(np.float64)


def one_hot(labels, n_cols: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    n_cols = int(labels.max()) + 1 if n_cols is None else n_cols
    return np.eye(n_cols)[labels]


def hard_stack(rng: np.random.Generator, n: int, c_max: int = 3):
    """Random one-hot stack of height 2 (leaf -> c1 -> c2 -> root) with no empty clusters."""
    c1 = int(rng.integers(1, min(c_max, n) + 1))
    c2 = int(rng.integers(1, c1 + 1))
    lab1 = np.concatenate([np.arange(c1), rng.integers(0, c1, n - c1)])
    rng.shuffle(lab1)
    lab2 = np.concatenate([np.arange(c2), rng.integers(0, c2, c1 - c2)])
    rng.shuffle(lab2)
    return lab1, lab2


def se_gap(w: np.ndarray, lab1, lab2) -> float:
    stack = entropy.AssignmentStack([one_hot(lab1), one_hot(lab2)])
    soft = entropy.soft_se(w, stack).item()
    tree = entropy.EncodingTree.from_partitions(w.shape[0], [lab1, lab2])
    return abs(soft - entropy.classical_se(w, tree))


def exhaustive_graphs(n: int):
    pairs = list(itertools.combinations(range(n), 2))
    for mask in range(1, 2 ** len(pairs)):
        w = np.zeros((n, n))
        for b, (i, j) in enumerate(pairs):
            if mask >> b & 1:
                w[i, j] = w[j, i] = 1.0
        yield w


def check_se_equivalence(n_random: int = 40, stacks_per_graph: int = 3, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for w in exhaustive_graphs(4):
        for _ in range(stacks_per_graph):
            worst = max(worst, se_gap(w, *hard_stack(rng, 4)))
            cases += 1
    for _ in range(n_random):
        n = int(rng.integers(6, 9))
        w = random_graph(rng, n)
        if w.sum() == 0:
            continue
        for _ in range(stacks_per_graph):
            worst = max(worst, se_gap(w, *hard_stack(rng, n)))
            cases += 1
    return CheckResult("se_hard_equivalence", worst < 1e-9, f"max |soft-classical| = {worst:.2e} over {cases} cases")


def check_se_reference_values() -> CheckResult:
    k3 = np.ones((3, 3)) - np.eye(3)
    one = entropy.classical_se(k3, entropy.EncodingTree.single_cluster(3))
    uniform = entropy.soft_se(k3, entropy.AssignmentStack([np.full((3, 2), 0.5)])).item()
    ok = abs(one - np.log2(3)) < 1e-9 and abs(uniform - 1.085) < 0.005
    return CheckResult("se_reference_values", ok, f"K3 one-cluster {one:.12f}, K3 uniform c=2 {uniform:.6f}")


def small_model(seed: int, n: int = 10, f: int = 5, d: int = 6, c: int = 3):
    rng = np.random.default_rng(seed)
    w = random_graph(rng, n, 0.4)
    # keep the graph neither empty nor complete so the CE sample exists
    if w.sum() == 0:
        w[0, 1] = w[1, 0] = 1.0
    ds = graph_io.GraphDataset(rng.random((n, f)), w, name=f"check{seed}")
    cfg = trainer.TrainConfig(embed_dim=d, seed=seed, feature_normalize="none")
    cfg.ass.clusters = [c]
    return trainer.Model(ds, cfg)


def model_gradient_error(seed: int, n: int = 10) -> float:
    model = small_model(seed, n)
    return dm.finite_diff_check(lambda _: model.forward(0).total,
                                dict(model.params.trainable()))


def check_gradients(n_inits: int = 5) -> CheckResult:
    rng = np.random.default_rng(1)
    # primitive level: every nonlinearity once, inputs kept away from kinks
    x = dm.parameter(rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1, 1], (3, 4)))
    y = dm.parameter(rng.uniform(0.5, 1.5, (4, 2)))

    def prim(_):
        h = dm.relu(x) + dm.leaky_relu(x, 0.2) * 0.5
        s = dm.row_softmax(dm.matmul(h, y))
        r = dm.row_normalize(dm.sigmoid(dm.matmul(x, y)))
        return dm.sum_all(dm.log(s) * r) + dm.sum_all(dm.sqrt(dm.matmul(x, y) * dm.matmul(x, y)))

    worst = dm.finite_diff_check(prim, {"x": x, "y": y})
    for s in range(n_inits):
        worst = max(worst, model_gradient_error(s))
    return CheckResult("gradients", worst < 1e-5, f"max relative error {worst:.2e}")


def check_metric_oracles(n_cases: int = 60, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_cases):
        n = int(rng.integers(2, 31))
        c_t, c_p = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        truth, pred = rng.integers(0, c_t, n), rng.integers(0, c_p, n)
        if metrics.ari(pred, truth) != metrics.ari_pairs_bruteforce(pred, truth):
            bad += 1
        if metrics.accuracy(pred, truth) != metrics.acc_bruteforce(pred, truth):
            bad += 1
    ok = bad == 0
    return CheckResult("metric_oracles", ok, f"{bad} disagreements over {n_cases} labelings")


def check_metric_examples() -> CheckResult:
    truth, pred = [0, 0, 1, 1], [0, 1, 0, 1]
    m = metrics.evaluate(pred, truth)
    ident = metrics.evaluate([2, 2, 0, 1], [0, 0, 1, 2])
    ok = (abs(m["nmi"]) < 1e-12 and abs(m["ari"] + 0.5) < 1e-12 and m["acc"] == 0.5
          and all(ident[k] == 1.0 for k in ("nmi", "ari", "acc", "f1")))
    return CheckResult("metric_examples", ok, f"ari {m['ari']:.6f}, acc {m['acc']}")


def check_softmax_rows(seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    positive = True
    for _ in range(50):
        a = rng.normal(0, 10, (int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        s = dm.row_softmax(dm.constant(a)).values
        worst = max(worst, float(np.max(np.abs(s.sum(axis=1) - 1.0))))
        positive &= bool(np.all(s > 0))
    return CheckResult("row_softmax_stochastic", worst < 1e-12 and positive, f"max row-sum error {worst:.1e}")


CHECKS = [check_se_reference_values, check_se_equivalence, check_gradients,
          check_metric_examples, check_metric_oracles, check_softmax_rows]


def run_all(out=print) -> list[CheckResult]:
    results = []
    for fn in CHECKS:
        start = time.perf_counter()
        try:
            res = fn()
        except Exception as e:      # a crash counts as a failure, not an abort
            res = CheckResult(fn.__name__.removeprefix("check_"), False, f"error: {e!r}")
        res.seconds = time.perf_counter() - start
        out(res.line())
        results.append(res)
    return results
