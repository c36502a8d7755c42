"""Random Forest training, warm-start extension, prediction and metrics.

Forests are immutable: fitting returns a new object, warm-start returns a
new object sharing the original tree instances, and prediction never
mutates anything, so forests are safe to share across threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    SchemaMismatch,
    SingleClassDataset,
    UnknownLabel,
)
from .rng import STREAM_TREE, derive_seed
from .tree import DecisionTree, grow_tree, trees_equal, votes_matrix

_MAX_FEATURES_MODES = ("sqrt", "log2", "all")


@dataclass(frozen=True)
class ForestParams:
    n_estimators: int
    max_features: str | int = "sqrt"
    max_depth: int | None = None
    min_samples_split: int = 2
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if isinstance(self.max_features, str):
            if self.max_features not in _MAX_FEATURES_MODES:
                raise ValueError(f"max_features must be one of {_MAX_FEATURES_MODES} or an int")
        elif self.max_features < 1:
            raise ValueError("fixed max_features must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.min_samples_split < 1:
            raise ValueError("min_samples_split must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def resolved_max_features(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        if self.max_features == "log2":
            return max(1, int(math.log2(n_features)))
        if self.max_features == "all":
            return n_features
        k = int(self.max_features)
        if k > n_features:
            raise ValueError(f"max_features={k} exceeds feature count {n_features}")
        return k


@dataclass(frozen=True)
class Metrics:
    """Binary-task classification metrics w.r.t. one positive class."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: tuple[tuple[int, int], tuple[int, int]]  # ((tn, fp), (fn, tp))
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": [list(self.confusion[0]), list(self.confusion[1])],
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        (tn, fp), (fn, tp) = d["confusion"]
        return cls(
            accuracy=float(d["accuracy"]),
            precision=float(d["precision"]),
            recall=float(d["recall"]),
            f1=float(d["f1"]),
            confusion=((int(tn), int(fp)), (int(fn), int(tp))),
            n_samples=int(d["n_samples"]),
        )


@dataclass(frozen=True)
class RandomForest:
    trees: tuple[DecisionTree, ...]
    params: ForestParams
    label_names: tuple[str, ...]
    feature_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "label_names", tuple(self.label_names))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if not self.trees:
            raise ValueError("a forest must contain at least one tree")
        nf, nc = len(self.feature_names), len(self.label_names)
        for t in self.trees:
            if t.n_features != nf or t.n_classes != nc:
                raise ValueError("all trees must agree on feature and class counts")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def structurally_equal(self, other: "RandomForest") -> bool:
        """Model identity: same schema tables and bit-identical trees.

        Training params are local metadata and deliberately excluded.
        """
        return (
            self.feature_names == other.feature_names
            and self.label_names == other.label_names
            and self.n_trees == other.n_trees
            and all(trees_equal(a, b) for a, b in zip(self.trees, other.trees))
        )


def _check_schema(forest: RandomForest, data: Dataset) -> None:
    if data.feature_names != forest.feature_names:
        raise SchemaMismatch(
            f"feature names differ: forest has {list(forest.feature_names)}, "
            f"data has {list(data.feature_names)}"
        )
    if data.label_names != forest.label_names:
        extra = set(data.label_names) - set(forest.label_names)
        if extra:
            raise UnknownLabel(f"data defines labels outside the forest's table: {sorted(extra)}")
        raise SchemaMismatch(
            f"label tables differ: forest has {list(forest.label_names)}, "
            f"data has {list(data.label_names)}"
        )


def _grow_range(data: Dataset, params: ForestParams, indices, n_jobs: int) -> list[DecisionTree]:
    max_feat = params.resolved_max_features(data.n_features)

    def one(i: int) -> DecisionTree:
        return grow_tree(
            data.features,
            data.labels,
            data.n_classes,
            max_feat,
            params.max_depth,
            params.min_samples_split,
            params.bootstrap,
            derive_seed(params.seed, STREAM_TREE, i),
        )

    if n_jobs <= 1:
        return [one(i) for i in indices]
    # per-tree streams are pre-derived from (seed, index), so parallel and
    # serial growth produce identical forests
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(one, indices))


def fit_forest(data: Dataset, params: ForestParams, n_jobs: int = 1) -> RandomForest:
    """Train ``params.n_estimators`` CART trees on ``data``.

    Deterministic for a fixed seed: tree i draws from the stream derived
    from (params.seed, STREAM_TREE, i) regardless of execution order.
    """
    if data.n_samples == 0:
        raise EmptyDataset("cannot fit a forest on an empty dataset")
    if np.unique(data.labels).size < 2:
        raise SingleClassDataset("dataset contains a single class; nothing to split on")
    trees = _grow_range(data, params, range(params.n_estimators), n_jobs)
    return RandomForest(tuple(trees), params, data.label_names, data.feature_names)


def warm_start_extend(
    forest: RandomForest, data: Dataset, n_additional: int, seed: int, n_jobs: int = 1
) -> RandomForest:
    """Return a forest whose first trees are ``forest``'s (shared, unchanged)
    plus ``n_additional`` new trees trained on ``data``.

    New tree j draws from the stream (seed, STREAM_TREE, n_existing + j), so
    successive extensions with distinct seeds never reuse a stream.
    """
    if n_additional < 1:
        raise ValueError("n_additional must be >= 1")
    _check_schema(forest, data)
    if data.n_samples == 0:
        raise EmptyDataset("cannot extend a forest on an empty dataset")
    if np.unique(data.labels).size < 2:
        raise SingleClassDataset("dataset contains a single class; nothing to split on")
    base = len(forest.trees)
    grow_params = replace(forest.params, seed=seed)
    new_trees = _grow_range(data, grow_params, range(base, base + n_additional), n_jobs)
    params = replace(forest.params, n_estimators=base + n_additional)
    return RandomForest(forest.trees + tuple(new_trees), params, forest.label_names, forest.feature_names)


def predict_batch(forest: RandomForest, X: np.ndarray) -> np.ndarray:
    """Majority-vote class-ids for each row; vote ties break to the lowest id."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise DimensionMismatch(
            f"expected rows of length {forest.n_features}, got shape {X.shape}"
        )
    votes = votes_matrix(forest.trees, X, forest.n_classes)
    return np.argmax(votes, axis=1).astype(np.int64)


def predict(forest: RandomForest, row) -> int:
    """Single-row majority vote."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.shape[0] != forest.n_features:
        raise DimensionMismatch(
            f"expected a row of length {forest.n_features}, got shape {row.shape}"
        )
    return int(predict_batch(forest, row.reshape(1, -1))[0])


def compute_metrics(y_true: np.ndarray, y_pred: np.ndarray, positive_label: int) -> Metrics:
    """Confusion-matrix metrics with precision/recall one-vs-rest on
    ``positive_label``; accuracy is the overall fraction correct."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    n = int(y_true.shape[0])
    if n == 0:
        raise EmptyDataset("cannot compute metrics over zero samples")
    pos_true = y_true == positive_label
    pos_pred = y_pred == positive_label
    tp = int(np.sum(pos_true & pos_pred))
    fp = int(np.sum(~pos_true & pos_pred))
    fn = int(np.sum(pos_true & ~pos_pred))
    tn = int(np.sum(~pos_true & ~pos_pred))
    accuracy = float(np.mean(y_true == y_pred))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Metrics(accuracy, precision, recall, f1, ((tn, fp), (fn, tp)), n)


def evaluate(forest: RandomForest, data: Dataset, positive_label: int) -> Metrics:
    """Evaluate ``forest`` on every row of ``data``."""
    _check_schema(forest, data)
    if data.n_samples == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    if not 0 <= positive_label < forest.n_classes:
        raise UnknownLabel(f"positive label id {positive_label} outside class table")
    preds = predict_batch(forest, data.features)
    return compute_metrics(data.labels, preds, positive_label)
