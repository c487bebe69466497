from collections import Counter
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

from namest.analysis import (FactorSpace, average_frequency, balance_frequency_subsets, factor_dataset,
                             fit_tree, gini, group_report)
from namest.errors import ContractError, DataError
from namest.evaluation import EvalReport, GroupScore, NameJudgment


def test_gini_values():
    assert gini([5, 0]) == 0.0
    assert gini([2, 2]) == 0.5
    assert abs(gini([3, 1]) - 0.375) < 1e-12
    assert abs(gini([1, 1, 1]) - 2 / 3) < 1e-12
    with pytest.raises(DataError):
        gini([0, 0])


def exact_gini(labels):
    n = len(labels)
    return 1 - sum(Fraction(c, n) ** 2 for c in Counter(labels).values())


def oracle_split(X, y):
    """Best split by full enumeration with exact rational impurities."""
    best = None
    n = len(y)
    for f in range(X.shape[1]):
        values = sorted(set(X[:, f].tolist()))
        for lo, hi in zip(values, values[1:]):
            t = (Fraction(lo) + Fraction(hi)) / 2
            left = [int(c) for x, c in zip(X[:, f], y) if Fraction(x) <= t]
            right = [int(c) for x, c in zip(X[:, f], y) if Fraction(x) > t]
            score = (len(left) * exact_gini(left) + len(right) * exact_gini(right)) / n
            if best is None or score < best[2]:
                best = (f, t, score)
    return best


def oracle_tree(X, y, depth, max_depth):
    if depth >= max_depth or len(set(y.tolist())) < 2:
        return None
    split = oracle_split(X, y)
    if split is None or split[2] >= exact_gini(y.tolist()):
        return None
    f, t, _ = split
    mask = X[:, f] <= float(t)
    return (f, float(t), oracle_tree(X[mask], y[mask], depth + 1, max_depth),
            oracle_tree(X[~mask], y[~mask], depth + 1, max_depth))


def as_tuple(node):
    if node.is_leaf:
        return None
    return (node.feature, node.threshold, as_tuple(node.left), as_tuple(node.right))


def test_tree_matches_exhaustive_oracle_on_small_datasets():
    rng = np.random.default_rng(0)
    for _ in range(400):
        n = int(rng.integers(1, 13))
        d = int(rng.integers(1, 7))
        X = rng.integers(0, 4, size=(n, d)).astype(float)
        X[:, 0] += rng.integers(0, 2, size=n) * 0.5
        y = rng.integers(0, 2, size=n)
        tree = fit_tree(X, y, max_depth=3)
        assert as_tuple(tree.root) == oracle_tree(X, y, 0, 3)
        assert tree.depth() <= 3


def test_every_split_strictly_reduces_impurity():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 4))
    y = (X[:, 0] + 0.5 * rng.normal(size=60) > 0).astype(int)
    tree = fit_tree(X, y, max_depth=3)

    def walk(node):
        if node.is_leaf:
            return
        children = (sum(node.left.counts) * gini(node.left.counts)
                    + sum(node.right.counts) * gini(node.right.counts)) / sum(node.counts)
        assert children < gini(node.counts)
        walk(node.left)
        walk(node.right)

    walk(tree.root)


def test_frequency_split_at_two_point_five():
    space = FactorSpace(["L0", "L1"], ["L0", "L1", "L2"])
    rows, labels = [], []
    for freq in range(0, 8):
        for spk in space.speakers:
            for ref in space.referents:
                rows.append(space.encode(freq, spk, ref))
                labels.append(int(freq >= 3))
    tree = fit_tree(np.array(rows), np.array(labels), feature_names=space.names)
    assert tree.root.feature == 0 and tree.root.threshold == 2.5
    assert tree.depth() == 1
    assert tree.to_dict()["root"]["criterion"] == "frequency <= 2.5"
    assert tree.to_text().startswith("frequency <= 2.5")
    assert space.dim == 1 + 2 + 3


def test_single_class_gives_leaf_and_empty_errors():
    tree = fit_tree(np.ones((4, 2)), np.ones(4, dtype=int))
    assert tree.root.is_leaf and tree.depth() == 0
    with pytest.raises(DataError):
        fit_tree(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_factor_dataset_one_hot():
    js = [NameJudgment("u", "Abe", "correct", referent_nat="L1", speaker_nat="L0", frequency=4),
          NameJudgment("v", "Bo", "omission", referent_nat="L0", speaker_nat="L1", frequency=0)]
    X, y, space = factor_dataset(js)
    assert space.names == ["frequency", "speaker=L0", "speaker=L1", "referent=L0", "referent=L1"]
    assert X.tolist() == [[4, 1, 0, 0, 1], [0, 0, 1, 1, 0]]
    assert y.tolist() == [1, 0]
    for row in X:
        assert row[1:3].sum() == 1 and row[3:].sum() == 1


# -- balancing --------------------------------------------------------------------

def sentences(texts):
    return [SimpleNamespace(id=str(i), transcript=t) for i, t in enumerate(texts)]


def imbalanced_set():
    texts = []
    for k in range(40):
        texts += [f"w{k} A{k % 4}"] * 2      # group a: each name 20 times
        texts += [f"v{k} B{k % 8}"]          # group b: each name 5 times
        texts += [f"u{k} plain"]
    return sentences(texts)


def test_balancing_reaches_tolerance():
    data = imbalanced_set()
    group_a = [f"A{k}" for k in range(4)] * 3
    group_b = [f"B{k}" for k in range(8)]
    runs = balance_frequency_subsets(data, group_a, group_b, runs=3, seed=7)
    ids = {u.id for u in data}
    keep_always = {u.id for u in data if not any(t.startswith("A") for t in u.transcript.split())}
    subsets = []
    for subset in runs:
        counts = Counter(t for u in subset for t in u.transcript.split())
        ratio = average_frequency(counts, group_a) / average_frequency(counts, group_b)
        assert 1 / 1.05 < ratio < 1.05
        kept = {u.id for u in subset}
        assert kept <= ids and keep_always <= kept
        subsets.append(frozenset(kept))
    assert len(set(subsets)) == 3


def test_balanced_input_is_unchanged():
    data = sentences(["A x", "B y", "A z", "B w"])
    runs = balance_frequency_subsets(data, ["A"], ["B"])
    assert runs == [data, data, data]


def test_balancing_errors():
    exhausted = sentences(["A B", "A B", "A B", "A x", "C"])
    with pytest.raises(DataError, match="cannot balance"):
        balance_frequency_subsets(exhausted, ["A"], ["B", "C"])
    overshoot = sentences(["A A A", "A A A", "B", "B", "B", "B"])
    with pytest.raises(DataError, match="overshot"):
        balance_frequency_subsets(overshoot, ["A"], ["B"])
    with pytest.raises(ContractError):
        balance_frequency_subsets(sentences(["A", "B", "B"]), ["A"], ["B"])


# -- grouped reports ---------------------------------------------------------------

def test_group_report_means_and_delta():
    one = group_report([{"referent_training": {"in": 40.0, "out": 20.0}}], "referent_training", "in", "out")
    assert (one.mean_a, one.mean_b, one.delta) == (40.0, 20.0, 20.0)
    two = group_report([{"g": {"a": 40.0, "b": 20.0}}, {"g": {"a": 44.0, "b": 28.0}}], "g", "a", "b")
    assert (two.mean_a, two.mean_b, two.delta) == (42.0, 24.0, 18.0)


def test_group_report_from_exported_json():
    reports = []
    for correct in ((3, 1), (2, 2), (4, 0)):
        r = EvalReport(task="asr", n_utterances=4)
        r.groups["speaker_origin"] = {"native": GroupScore(correct[0], 4), "foreign": GroupScore(correct[1], 4)}
        reports.append(EvalReport.from_dict(r.to_dict()))
    cmp = group_report(reports, "speaker_origin", "native", "foreign")
    # spreadsheet-style: (0.75 + 0.5 + 1.0) / 3 and (0.25 + 0.5 + 0) / 3
    assert cmp.mean_a == pytest.approx(0.75) and cmp.mean_b == pytest.approx(0.25)
    assert cmp.delta == pytest.approx(0.5)
    with pytest.raises(DataError):
        group_report(reports, "speaker_origin", "native", "martian")
