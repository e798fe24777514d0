import itertools

import numpy as np
import pytest

from dese import metrics
from dese.metrics import contingency, evaluate, hungarian_match


def relabel(labels, rng):
    labels = np.asarray(labels)
    ids = np.unique(labels)
    new = rng.permutation(np.arange(100, 100 + ids.size))
    return new[np.searchsorted(ids, labels)]


def test_identical_partitions_score_one(rng):
    truth = rng.integers(0, 4, 40)
    m = evaluate(relabel(truth, rng), truth)
    assert (m["nmi"], m["ari"], m["acc"], m["f1"]) == (1.0, 1.0, 1.0, 1.0)
    assert m["cluster_count_match"]


def test_crossed_example():
    m = evaluate([0, 1, 0, 1], [0, 0, 1, 1])
    assert abs(m["nmi"]) < 1e-12
    # pair counts: 0 agreeing-together, 2+2 split one way, 2 apart in both
    assert m["ari"] == pytest.approx(-0.5, abs=1e-12)
    assert m["acc"] == 0.5


def test_single_cluster_both_sides():
    m = evaluate([3, 3, 3], [1, 1, 1])
    assert m["nmi"] == 1.0 and m["ari"] == 1.0 and m["acc"] == 1.0


def test_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        evaluate([0, 1], [0, 1, 1])


def test_count_mismatch_annotated():
    m = evaluate([0, 0, 1, 2], [0, 0, 1, 1])
    assert not m["cluster_count_match"]
    assert (m["n_pred_clusters"], m["n_true_clusters"]) == (3, 2)
    assert m["acc"] == 0.75


def test_metrics_invariant_under_relabeling(rng):
    for _ in range(50):
        n = int(rng.integers(2, 40))
        pred, truth = rng.integers(0, 5, n), rng.integers(0, 4, n)
        base = evaluate(pred, truth)
        other = evaluate(relabel(pred, rng), relabel(truth, rng))
        for key in ("nmi", "ari", "acc", "f1"):
            assert other[key] == pytest.approx(base[key], abs=1e-12)


def test_metric_ranges(rng):
    for _ in range(100):
        n = int(rng.integers(2, 60))
        m = evaluate(rng.integers(0, 6, n), rng.integers(0, 6, n))
        assert 0 <= m["nmi"] <= 1 and 0 <= m["acc"] <= 1 and 0 <= m["f1"] <= 1
        assert -1 <= m["ari"] <= 1


def test_random_ari_near_zero():
    rng = np.random.default_rng(0)
    truth = np.repeat(np.arange(4), 50)
    aris = [metrics.ari(rng.integers(0, 4, 200), truth) for _ in range(200)]
    assert abs(np.mean(aris)) < 0.05


def test_ari_matches_pair_bruteforce(rng):
    for _ in range(200):
        n = int(rng.integers(2, 31))
        pred, truth = rng.integers(0, int(rng.integers(1, 7)), n), rng.integers(0, int(rng.integers(1, 7)), n)
        assert metrics.ari(pred, truth) == metrics.ari_pairs_bruteforce(pred, truth)


def test_acc_matches_exhaustive_matching(rng):
    for _ in range(200):
        n = int(rng.integers(2, 31))
        pred, truth = rng.integers(0, int(rng.integers(1, 7)), n), rng.integers(0, int(rng.integers(1, 7)), n)
        assert metrics.accuracy(pred, truth) == metrics.acc_bruteforce(pred, truth)


def test_nmi_norm_variants():
    pred, truth = [0, 0, 1, 1, 2, 2], [0, 0, 1, 1, 1, 1]
    vals = {k: metrics.nmi(pred, truth, k) for k in metrics.NMI_NORMS}
    assert vals["min"] == pytest.approx(1.0)
    assert vals["max"] <= vals["sqrt"] <= vals["min"]
    assert vals["max"] <= vals["arithmetic"] <= vals["min"]
    with pytest.raises(ValueError):
        metrics.nmi(pred, truth, "geometric-ish")


def test_against_sklearn(rng):
    skm = pytest.importorskip("sklearn.metrics")
    for _ in range(50):
        n = int(rng.integers(5, 80))
        pred, truth = rng.integers(0, 5, n), rng.integers(0, 4, n)
        assert metrics.nmi(pred, truth) == pytest.approx(skm.normalized_mutual_info_score(truth, pred), abs=1e-10)
        assert metrics.ari(pred, truth) == pytest.approx(skm.adjusted_rand_score(truth, pred), abs=1e-10)


def test_macro_f1_example():
    # truth classes {0: 3 nodes, 1: 1 node}; pred puts one class-0 node with the class-1 node
    f1 = metrics.macro_f1([0, 0, 1, 1], [0, 0, 0, 1])
    assert f1 == pytest.approx(((2 * 1 * (2 / 3)) / (1 + 2 / 3) + (2 * 0.5 * 1) / 1.5) / 2)


# ---- contingency and matching

def test_contingency_diagonal():
    labels = [0, 0, 0, 1, 1, 1, 1, 1]
    np.testing.assert_array_equal(contingency(labels, labels).counts, [[3, 0], [0, 5]])


def test_contingency_single_class():
    t = contingency([0, 1, 1, 0, 1], [7] * 5)
    assert t.counts.shape == (1, 2) and t.total == 5


def test_contingency_marginals(rng):
    for _ in range(100):
        n = int(rng.integers(1, 50))
        pred, truth = rng.integers(0, 5, n), rng.integers(0, 5, n)
        t = contingency(pred, truth)
        np.testing.assert_array_equal(t.truth_sizes, np.unique(truth, return_counts=True)[1])
        np.testing.assert_array_equal(t.pred_sizes, np.unique(pred, return_counts=True)[1])
        assert t.total == n


def test_contingency_csv():
    csv = contingency([5, 5, 6], [0, 1, 1]).to_csv()
    assert csv == "truth\\pred,5,6\n0,1,0\n1,1,1\n"


def test_matching_diagonal_and_antidiagonal():
    assert hungarian_match(contingency([0, 0, 1, 2], [0, 0, 1, 2])) == {0: 0, 1: 1, 2: 2}
    assert hungarian_match(contingency([2, 2, 1, 0], [0, 0, 1, 2])) == {2: 0, 1: 1, 0: 2}


def test_matching_tie_break_is_lexicographic():
    # every one-to-one map matches one node; the smallest is the identity
    assert hungarian_match(contingency([0, 1], [1, 0])) == {0: 1, 1: 0}
    assert hungarian_match(contingency([0, 0, 1, 1], [0, 1, 0, 1])) == {0: 0, 1: 1}


def test_matching_optimal_vs_exhaustive(rng):
    for _ in range(200):
        c = int(rng.integers(1, 7))
        counts = rng.integers(0, 6, (c, c))
        counts[0, 0] += 1
        truth = np.repeat(np.repeat(np.arange(c), c), counts.ravel())
        pred = np.repeat(np.tile(np.arange(c), c), counts.ravel())
        table = contingency(pred, truth)
        mapping = hungarian_match(table)
        got = sum(table.counts[list(table.truth_ids).index(t), list(table.pred_ids).index(p)]
                  for p, t in mapping.items())
        tc = table.counts
        size = max(tc.shape)
        padded = np.zeros((size, size), dtype=int)
        padded[: tc.shape[0], : tc.shape[1]] = tc
        best = max(sum(padded[perm[j], j] for j in range(size)) for perm in itertools.permutations(range(size)))
        assert got == best
