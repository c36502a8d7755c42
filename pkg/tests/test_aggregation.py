import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedrf.aggregation import (
    ClientWeights,
    aggregate,
    concat_aggregate,
    expected_counts,
    resolve_weights,
    uniform_aggregate,
)
from fedrf.errors import (
    DeclaredWeightsExceedOne,
    EmptyForest,
    NoSuccessfulClients,
    SchemaMismatch,
)
from fedrf.forest import ForestParams, RandomForest
from fedrf.tree import trees_equal
from fedrf.wire import encode_forest

from conftest import leaf_tree, random_fitted_forest


def tagged_forest(silo_index: int, n_trees: int) -> RandomForest:
    """Forest whose tree t is identifiable: counts[0] = silo*10000 + t + 1."""
    trees = tuple(
        leaf_tree([silo_index * 10_000 + t + 1, 1], n_features=2) for t in range(n_trees)
    )
    return RandomForest(
        trees, ForestParams(n_estimators=n_trees), ("0", "1"), ("f0", "f1")
    )


def provenance(forest: RandomForest) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for tree in forest.trees:
        tag = int(tree.class_counts[0, 0]) - 1
        out.setdefault(tag // 10_000, []).append(tag % 10_000)
    return out


# --- resolve_weights -----------------------------------------------------------

def test_equal_split_when_all_absent():
    resolved = resolve_weights(ClientWeights.of({"A": None, "B": None}), {"A", "B"})
    assert resolved.as_dict() == {"A": 0.5, "B": 0.5}


def test_remaining_mass_split_equally():
    resolved = resolve_weights(
        ClientWeights.of({"A": 0.5, "B": None, "C": None}), {"A", "B", "C"}
    )
    assert resolved.as_dict() == {"A": 0.5, "B": 0.25, "C": 0.25}


def test_renormalization_over_survivors():
    resolved = resolve_weights(ClientWeights.of({"A": 0.5, "B": 0.5}), {"A"})
    assert resolved.as_dict() == {"A": 1.0}


def test_failed_silo_mass_goes_to_absent_survivors():
    resolved = resolve_weights(
        ClientWeights.of({"A": 0.5, "B": 0.5, "C": None}), {"A", "C"}
    )
    assert resolved.as_dict() == pytest.approx({"A": 0.5, "C": 0.5})


def test_no_successful_clients():
    with pytest.raises(NoSuccessfulClients):
        resolve_weights(ClientWeights.of({"A": 0.5}), set())


def test_declared_weights_exceeding_one():
    with pytest.raises(DeclaredWeightsExceedOne):
        resolve_weights(ClientWeights.of({"A": 0.7, "B": 0.7}), {"A", "B"})


def test_weights_must_be_in_unit_interval():
    with pytest.raises(ValueError):
        ClientWeights.of({"A": 1.5})
    with pytest.raises(ValueError):
        ClientWeights.of({"A": -0.1})


@st.composite
def weight_instances(draw):
    n = draw(st.integers(min_value=1, max_value=6))
    ids = [f"s{i}" for i in range(n)]
    weights = draw(
        st.lists(
            st.one_of(st.none(), st.floats(min_value=0.0, max_value=1.0)),
            min_size=n,
            max_size=n,
        )
    )
    present = sum(w for w in weights if w is not None)
    if present > 1.0:
        weights = [None if w is None else w / present for w in weights]
    successful = {s for s in ids if draw(st.booleans())}
    if not successful:
        successful = {ids[0]}
    return ClientWeights(tuple(zip(ids, weights))), successful


@given(weight_instances())
@settings(max_examples=200)
def test_resolution_properties(instance):
    declared, successful = instance
    survivors = [(s, w) for s, w in declared.entries if s in successful]
    try:
        resolved = resolve_weights(declared, successful)
    except NoSuccessfulClients:
        # only reachable when every survivor declared weight zero
        assert all(w == 0.0 for _, w in survivors)
        return
    values = resolved.as_dict()
    assert set(values) == successful
    assert abs(sum(values.values()) - 1.0) <= 1e-9
    absent = [s for s, w in survivors if w is None]
    if absent:
        # declared survivors keep their weights; absent ones are equal
        for s, w in survivors:
            if w is not None:
                assert values[s] == w
        shares = [values[s] for s in absent]
        assert max(shares) - min(shares) <= 1e-12
    else:
        total = sum(w for _, w in survivors)
        for s, w in survivors:
            assert values[s] == pytest.approx(w / total)


# --- aggregate ------------------------------------------------------------------

def test_three_equal_silos_ninety_trees():
    forests = {f"s{i}": tagged_forest(i, 90) for i in range(3)}
    weights = resolve_weights(ClientWeights.all_absent(forests), set(forests))
    out = aggregate(forests, weights, seed=4)
    assert out.n_trees == 90
    assert {k: len(v) for k, v in provenance(out).items()} == {0: 30, 1: 30, 2: 30}


def test_seventy_thirty_split():
    forests = {"a": tagged_forest(0, 100), "b": tagged_forest(1, 100)}
    weights = ClientWeights.of({"a": 0.7, "b": 0.3})
    out = aggregate(forests, weights, seed=1)
    assert out.n_trees == 100
    assert {k: len(v) for k, v in provenance(out).items()} == {0: 70, 1: 30}


def test_topup_covers_floor_deficit():
    forests = {"a": tagged_forest(0, 101), "b": tagged_forest(1, 101)}
    weights = ClientWeights.of({"a": 0.5, "b": 0.5})
    out = aggregate(forests, weights, seed=2)
    counts = {k: len(v) for k, v in provenance(out).items()}
    assert out.n_trees == 101
    # floors give 50+50; the single top-up comes from the first silo
    assert counts == {0: 51, 1: 50}


def test_no_duplicate_trees_within_silo_sampling():
    forests = {"a": tagged_forest(0, 40), "b": tagged_forest(1, 60)}
    weights = ClientWeights.of({"a": 0.5, "b": 0.5})
    out = aggregate(forests, weights, seed=9)
    for silo, indices in provenance(out).items():
        assert len(indices) == len(set(indices))


def test_tree_provenance_is_structural_identity():
    forests = {"a": random_fitted_forest(seed=1, n_trees=4), "b": random_fitted_forest(seed=2, n_trees=4)}
    out = uniform_aggregate(forests, seed=3)
    for tree in out.trees:
        owners = [
            silo
            for silo, f in forests.items()
            if any(trees_equal(tree, t) for t in f.trees)
        ]
        assert len(owners) == 1


def test_uniform_examples():
    two = {"a": tagged_forest(0, 100), "b": tagged_forest(1, 100)}
    out = uniform_aggregate(two, seed=5)
    assert {k: len(v) for k, v in provenance(out).items()} == {0: 50, 1: 50}

    single = {"only": tagged_forest(0, 31)}
    out = uniform_aggregate(single, seed=6)
    assert sorted(provenance(out)[0]) == list(range(31))  # same tree multiset

    four = {f"s{i}": tagged_forest(i, 80) for i in range(4)}
    out = uniform_aggregate(four, seed=7)
    assert {k: len(v) for k, v in provenance(out).items()} == {i: 20 for i in range(4)}


def test_zero_weight_silo_only_tops_up_as_last_resort():
    forests = {"a": tagged_forest(0, 10), "b": tagged_forest(1, 10)}
    out = aggregate(forests, ClientWeights.of({"a": 1.0, "b": 0.0}), seed=1)
    assert provenance(out).keys() == {0}

    short = {"a": tagged_forest(0, 5), "b": tagged_forest(1, 10)}
    out = aggregate(short, ClientWeights.of({"a": 1.0, "b": 0.0}), seed=1)
    counts = {k: len(v) for k, v in provenance(out).items()}
    assert counts == {0: 5, 1: 5}  # a exhausted first, b fills the rest


def test_aggregate_is_deterministic():
    forests = {"a": random_fitted_forest(seed=3, n_trees=6), "b": random_fitted_forest(seed=4, n_trees=9)}
    weights = resolve_weights(ClientWeights.all_absent(forests), set(forests))
    one = aggregate(forests, weights, seed=42)
    two = aggregate(forests, weights, seed=42)
    assert encode_forest(one) == encode_forest(two)
    other = aggregate(forests, weights, seed=43)
    assert encode_forest(one) != encode_forest(other)


def test_aggregate_rejects_bad_inputs():
    with pytest.raises(EmptyForest):
        aggregate({}, ClientWeights.of({}), seed=0)
    mismatch = {
        "a": random_fitted_forest(seed=1),
        "b": RandomForest(
            (leaf_tree([1, 1], n_features=1),),
            ForestParams(n_estimators=1),
            ("0", "1"),
            ("other",),
        ),
    }
    weights = ClientWeights.of({"a": 0.5, "b": 0.5})
    with pytest.raises(SchemaMismatch):
        aggregate(mismatch, weights, seed=0)
    with pytest.raises(ValueError):
        aggregate({"a": random_fitted_forest(seed=1)}, ClientWeights.of({"a": None}), seed=0)


def test_count_law_small_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_silos = int(rng.integers(1, 5))
        sizes = [int(rng.integers(1, 40)) for _ in range(n_silos)]
        raw = rng.random(n_silos)
        weights = raw / raw.sum()
        forests = {f"s{i}": tagged_forest(i, sizes[i]) for i in range(n_silos)}
        cw = ClientWeights.of({f"s{i}": float(weights[i]) for i in range(n_silos)})
        resolved = resolve_weights(cw, set(forests))
        out = aggregate(forests, resolved, seed=int(rng.integers(2**32)))
        got = {k: len(v) for k, v in provenance(out).items()}
        floors = {i: math.floor(resolved.as_dict()[f"s{i}"] * sizes[i]) for i in range(n_silos)}
        target = max(sizes)
        if sum(floors.values()) <= target:
            assert out.n_trees == target
        for i in range(n_silos):
            assert got.get(i, 0) >= floors[i]
            assert got.get(i, 0) <= sizes[i]


def test_weight_monotonicity_of_pre_topup_counts():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n_silos = int(rng.integers(2, 5))
        size = int(rng.integers(5, 60))
        raw = rng.random(n_silos)
        w = raw / raw.sum()
        sizes = {f"s{i}": size for i in range(n_silos)}
        bump = w[0] + float(rng.random()) * (1.0 - w[0]) * 0.99  # strictly not below w[0]
        rest = (1 - bump) / (w[1:].sum()) * w[1:]
        w2 = np.concatenate([[bump], rest])
        ks1, _ = expected_counts(
            ClientWeights.of({f"s{i}": float(w[i]) for i in range(n_silos)}), sizes
        )
        ks2, _ = expected_counts(
            ClientWeights.of({f"s{i}": float(w2[i]) for i in range(n_silos)}), sizes
        )
        assert ks2["s0"] >= ks1["s0"]


def test_concat_aggregate_sums_sizes():
    forests = {"a": tagged_forest(0, 7), "b": tagged_forest(1, 5)}
    out = concat_aggregate(forests)
    assert out.n_trees == 12


@pytest.mark.slow
def test_aggregation_time_scales_linearly():
    def run(n):
        forests = {"a": tagged_forest(0, n), "b": tagged_forest(1, n)}
        weights = ClientWeights.of({"a": 0.5, "b": 0.5})
        best = float("inf")
        for _ in range(3):
            t0 = time.perf_counter()
            aggregate(forests, weights, seed=1)
            best = min(best, time.perf_counter() - t0)
        return best

    small = run(500)   # 1e3 trees total
    large = run(50_000)  # 1e5 trees total
    assert large < small * 600  # linear growth (100x) with generous slack
