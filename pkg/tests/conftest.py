import numpy as np
import pytest

from fedrf.dataset import DataParams, Dataset
from fedrf.forest import ForestParams, RandomForest, fit_forest
from fedrf.tree import DecisionTree

ACCEPTANCE_LINES: list[str] = []


def acceptance_record(criterion: int, title: str, status: str, detail: str = "") -> None:
    line = f"criterion {criterion:>2} [{status:<4}] {title}"
    if detail:
        line += f" :: {detail}"
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_dataset(n=60, f=4, n_classes=2, seed=0, feature_names=None, label_names=None):
    """Noisy but learnable synthetic classification data."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, f))
    logits = X @ rng.normal(size=f) + 0.4 * rng.normal(size=n)
    if n_classes == 2:
        y = (logits > np.median(logits)).astype(np.int64)
    else:
        edges = np.quantile(logits, np.linspace(0, 1, n_classes + 1)[1:-1])
        y = np.digitize(logits, edges).astype(np.int64)
    names = feature_names or tuple(f"f{i}" for i in range(f))
    labels = label_names or tuple(str(c) for c in range(n_classes))
    return Dataset(names, X, y, labels)


def leaf_tree(class_counts, n_features=2) -> DecisionTree:
    """Single-leaf tree predicting argmax(class_counts)."""
    counts = np.asarray([class_counts], dtype=np.int64)
    return DecisionTree(
        feature=np.array([-1], dtype=np.int32),
        threshold=np.array([0.0]),
        left=np.array([0], dtype=np.int32),
        right=np.array([0], dtype=np.int32),
        class_counts=counts,
        n_features=n_features,
    )


def forest_of_leaves(vote_classes, n_classes=2, n_features=2) -> RandomForest:
    """Forest whose tree t deterministically votes vote_classes[t]."""
    trees = []
    for c in vote_classes:
        counts = [0] * n_classes
        counts[c] = 1
        trees.append(leaf_tree(counts, n_features))
    return RandomForest(
        tuple(trees),
        ForestParams(n_estimators=len(trees)),
        tuple(str(i) for i in range(n_classes)),
        tuple(f"f{i}" for i in range(n_features)),
    )


def random_fitted_forest(seed=0, n_trees=3, n=25, f=3, n_classes=2) -> RandomForest:
    data = make_dataset(n=n, f=f, n_classes=n_classes, seed=seed)
    return fit_forest(data, ForestParams(n_estimators=n_trees, seed=seed))


@pytest.fixture
def small_data():
    return make_dataset(n=80, f=4, seed=1)


@pytest.fixture
def small_params():
    return ForestParams(n_estimators=5, seed=7)


@pytest.fixture
def data_params():
    return DataParams("label", (), "1", ("0", "1"))
