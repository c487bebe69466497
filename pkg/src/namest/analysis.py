"""Factor analysis of name errors and balanced-frequency training subsets.

A depth-limited CART classifier over (frequency, speaker one-hot, referent
one-hot) shows which factor best separates correct from wrong names. The
subset sampler removes training sentences until two name groups have the
same average training frequency, so a remaining accuracy gap can be put
down to nationality rather than frequency.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError
from .evaluation import EvalReport, NameJudgment

TIE_TOL = 1e-12


def gini(counts: Sequence[float]) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise DataError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise DataError("gini of an empty node")
    p = counts / total
    return float(1.0 - np.sum(p * p))


# -- factor encoding ----------------------------------------------------------

@dataclass
class FactorSpace:
    """Feature layout: frequency, then speaker and referent one-hot blocks."""

    speakers: list[str]
    referents: list[str]

    @property
    def names(self) -> list[str]:
        return (["frequency"] + [f"speaker={s}" for s in self.speakers]
                + [f"referent={r}" for r in self.referents])

    @property
    def dim(self) -> int:
        return 1 + len(self.speakers) + len(self.referents)

    def encode(self, frequency: int, speaker: str, referent: str) -> np.ndarray:
        if speaker not in self.speakers or referent not in self.referents:
            raise DataError(f"unknown nationality {speaker!r}/{referent!r}")
        v = np.zeros(self.dim)
        v[0] = frequency
        v[1 + self.speakers.index(speaker)] = 1.0
        v[1 + len(self.speakers) + self.referents.index(referent)] = 1.0
        return v


def factor_dataset(judgments: Sequence[NameJudgment], space: FactorSpace | None = None):
    """``(X, y, space)`` from name judgments; ``y`` is 1 for correct names."""
    if not judgments:
        raise DataError("no judgments to encode")
    if any(j.frequency is None for j in judgments):
        raise DataError("judgments lack training frequencies")
    if space is None:
        space = FactorSpace(sorted({j.speaker_nat for j in judgments}),
                            sorted({j.referent_nat for j in judgments}))
    X = np.stack([space.encode(j.frequency, j.speaker_nat, j.referent_nat) for j in judgments])
    y = np.array([j.verdict == "correct" for j in judgments], dtype=np.int64)
    return X, y, space


# -- CART ----------------------------------------------------------------------

@dataclass
class TreeNode:
    counts: list[int]
    depth: int
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.counts))


def best_split(X: np.ndarray, y: np.ndarray, n_classes: int):
    """(feature, threshold, weighted child gini) of the best split, or None.

    Thresholds are midpoints between consecutive distinct values; the left
    child takes ``x <= threshold``. Ties go to the lowest feature index, then
    the lowest threshold.
    """
    n = len(y)
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), ys] = 1
        left = np.cumsum(onehot, axis=0)
        total = left[-1]
        for i in range(n - 1):
            if xs[i] == xs[i + 1]:
                continue
            lc, rc = left[i], total - left[i]
            nl, nr = i + 1, n - i - 1
            score = (nl * gini(lc) + nr * gini(rc)) / n
            if best is None or score < best[2] - TIE_TOL:
                best = (f, (xs[i] + xs[i + 1]) / 2.0, score)
    return best


@dataclass
class FactorTree:
    root: TreeNode
    max_depth: int
    feature_names: list[str] = field(default_factory=list)

    def depth(self) -> int:
        def walk(node):
            return 0 if node.is_leaf else 1 + max(walk(node.left), walk(node.right))
        return walk(self.root)

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = []
        for row in np.atleast_2d(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.feature] <= node.threshold else node.right
            out.append(node.prediction)
        return np.array(out)

    def _fname(self, f: int) -> str:
        return self.feature_names[f] if f < len(self.feature_names) else f"x[{f}]"

    def to_dict(self) -> dict:
        def walk(node):
            d = {"counts": node.counts, "gini": gini(node.counts)}
            if not node.is_leaf:
                d.update(feature=self._fname(node.feature), feature_index=node.feature,
                         threshold=node.threshold,
                         criterion=f"{self._fname(node.feature)} <= {node.threshold:g}",
                         left=walk(node.left), right=walk(node.right))
            return d
        return {"max_depth": self.max_depth, "root": walk(self.root)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self) -> str:
        lines = []

        def walk(node, indent, label):
            pad = "  " * indent
            if node.is_leaf:
                lines.append(f"{pad}{label}leaf counts={node.counts} predict={node.prediction}")
                return
            lines.append(f"{pad}{label}{self._fname(node.feature)} <= {node.threshold:g} "
                         f"(counts={node.counts}, gini={gini(node.counts):.4f})")
            walk(node.left, indent + 1, "yes: ")
            walk(node.right, indent + 1, "no:  ")

        walk(self.root, 0, "")
        return "\n".join(lines) + "\n"


def fit_tree(X, y, max_depth: int = 3, feature_names: Sequence[str] | None = None) -> FactorTree:
    """Greedy CART with Gini impurity; a node is split only if impurity strictly drops."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0 or len(X) != len(y):
        raise DataError("fit_tree needs a non-empty 2-D sample matrix with one label per row")
    if max_depth < 0:
        raise ContractError("max_depth must be >= 0")
    n_classes = max(2, int(y.max()) + 1)

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        counts = np.bincount(y[idx], minlength=n_classes)
        node = TreeNode([int(c) for c in counts], depth)
        if depth >= max_depth or np.count_nonzero(counts) < 2:
            return node
        split = best_split(X[idx], y[idx], n_classes)
        if split is None or split[2] >= gini(counts) - TIE_TOL:
            return node
        f, t, _ = split
        mask = X[idx, f] <= t
        node.feature, node.threshold = f, float(t)
        node.left = grow(idx[mask], depth + 1)
        node.right = grow(idx[~mask], depth + 1)
        return node

    return FactorTree(grow(np.arange(len(y)), 0), max_depth, list(feature_names or []))


# -- balanced subsets -----------------------------------------------------------

def average_frequency(counts: Counter, tokens: Sequence[str]) -> float:
    """Mean training count over name tokens (one entry per occurrence)."""
    if not tokens:
        raise DataError("empty name group")
    return float(np.mean([counts.get(t, 0) for t in tokens]))


def _transcript(u) -> str:
    return u.transcript


def balance_frequency_subsets(train_set: Sequence, group_a: Sequence[str], group_b: Sequence[str],
                              runs: int = 3, seed: int = 0, tolerance: float = 0.05,
                              text_of: Callable = _transcript) -> list[list]:
    """Filtered copies of ``train_set`` where both groups' average frequency agree within ``tolerance``.

    ``group_a``/``group_b`` list evaluation name occurrences, so averages are
    per token. Sentences mentioning a group-a name and no group-b name are
    removed in random order until ``|avg_a - avg_b| < tolerance * avg_b``.
    """
    if runs < 1:
        raise ContractError("runs must be >= 1")
    a_types, b_types = set(group_a), set(group_b)
    tokens = [text_of(u).split() for u in train_set]
    counts = Counter(t for toks in tokens for t in toks)
    avg_a, avg_b = average_frequency(counts, group_a), average_frequency(counts, group_b)
    if abs(avg_a - avg_b) < tolerance * avg_b:
        return [list(train_set) for _ in range(runs)]
    if avg_a < avg_b:
        raise ContractError(f"group a must be the more frequent one (avg {avg_a:.3f} < {avg_b:.3f})")
    need_a = Counter(group_a)
    candidates = [i for i, toks in enumerate(tokens)
                  if a_types.intersection(toks) and not b_types.intersection(toks)]

    out = []
    for child in np.random.SeedSequence(seed).spawn(runs):
        rng = np.random.default_rng(child)
        local = counts.copy()
        total_a = sum(local.get(t, 0) * m for t, m in need_a.items())
        removed: set[int] = set()
        for i in rng.permutation(candidates):
            if abs(total_a / len(group_a) - avg_b) < tolerance * avg_b:
                break
            if total_a / len(group_a) < avg_b:
                raise DataError(f"overshot balance: avg_a {total_a / len(group_a):.3f} < avg_b {avg_b:.3f}")
            for t in tokens[i]:
                local[t] -= 1
                total_a -= need_a.get(t, 0)
            removed.add(int(i))
        avg = total_a / len(group_a)
        if abs(avg - avg_b) >= tolerance * avg_b:
            raise DataError(f"cannot balance: removed all {len(candidates)} candidate sentences, "
                            f"avg_a {avg:.3f} vs avg_b {avg_b:.3f}")
        out.append([u for i, u in enumerate(train_set) if i not in removed])
    return out


# -- grouped reports ---------------------------------------------------------------

@dataclass
class GroupComparison:
    group: str
    a: str
    b: str
    mean_a: float
    mean_b: float
    delta: float
    runs: list[tuple[float, float]]

    def to_dict(self) -> dict:
        return {"group": self.group, "a": self.a, "b": self.b, "mean_a": self.mean_a,
                "mean_b": self.mean_b, "delta": self.delta, "runs": [list(r) for r in self.runs]}


def _accuracy(report: EvalReport | dict, group: str, key: str) -> float:
    if isinstance(report, EvalReport):
        score = report.groups.get(group, {}).get(key)
        acc = None if score is None else score.accuracy
    else:
        acc = report.get(group, {}).get(key)
    if acc is None:
        raise DataError(f"no names in group {group}={key}")
    return float(acc)


def group_report(reports: Sequence[EvalReport | dict], group: str, a: str, b: str) -> GroupComparison:
    """Mean accuracy of groups ``a`` and ``b`` over runs and ``delta = a - b``.

    A report may also be a plain ``{group: {key: accuracy}}`` mapping.
    """
    if not reports:
        raise DataError("group_report needs at least one run")
    runs = [(_accuracy(r, group, a), _accuracy(r, group, b)) for r in reports]
    mean_a = float(np.mean([r[0] for r in runs]))
    mean_b = float(np.mean([r[1] for r in runs]))
    return GroupComparison(group, a, b, mean_a, mean_b, mean_a - mean_b, runs)


def average_groups(reports: Iterable[EvalReport], group: str) -> dict[str, float]:
    """Mean accuracy per key of ``group`` over the runs that have it."""
    values: dict[str, list[float]] = {}
    for r in reports:
        for key, score in r.groups.get(group, {}).items():
            if score.accuracy is not None:
                values.setdefault(key, []).append(score.accuracy)
    return {k: float(np.mean(v)) for k, v in sorted(values.items())}
