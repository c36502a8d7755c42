"""Global-forest construction: weight resolution and weighted tree sampling.

Each surviving client keeps its declared weight; the unclaimed probability
mass is split equally (or proportionally to sample counts, at the caller's
option) among clients that declared none.  Aggregation then draws
floor(w_i * N_i) trees from client i without replacement and tops up
round-robin, in descending weight order, until the global forest matches
the largest client forest.  Runtime is linear in the total tree count.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum

from .errors import (
    DeclaredWeightsExceedOne,
    EmptyForest,
    NoSuccessfulClients,
    SchemaMismatch,
)
from .forest import RandomForest
from .rng import STREAM_AGGREGATE, SplitMix64, derive_seed

_SUM_TOL = 1e-9

log = logging.getLogger(__name__)


class AggregationStrategy(str, Enum):
    UNIFORM = "uniform"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class ClientWeights:
    """Ordered silo-id -> optional weight in [0, 1]; None means undeclared."""

    entries: tuple[tuple[str, float | None], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((str(k), v) for k, v in self.entries))
        seen = set()
        for silo, w in self.entries:
            if silo in seen:
                raise ValueError(f"duplicate silo id {silo!r}")
            seen.add(silo)
            if w is not None and not 0.0 <= w <= 1.0:
                raise ValueError(f"weight for {silo!r} must be in [0, 1], got {w}")

    @classmethod
    def of(cls, mapping) -> "ClientWeights":
        return cls(tuple(mapping.items()))

    @classmethod
    def all_absent(cls, silo_ids) -> "ClientWeights":
        return cls(tuple((s, None) for s in silo_ids))

    def as_dict(self) -> dict[str, float | None]:
        return dict(self.entries)

    def silo_ids(self) -> tuple[str, ...]:
        return tuple(s for s, _ in self.entries)

    def is_resolved(self) -> bool:
        if any(w is None for _, w in self.entries):
            return False
        return abs(sum(w for _, w in self.entries) - 1.0) <= _SUM_TOL


def resolve_weights(declared: ClientWeights, successful: set[str]) -> ClientWeights:
    """Fill in missing weights over the clients that completed the round.

    Declared silos that failed are dropped (their mass is freed).  Surviving
    declared silos keep their weights; the remaining mass is split equally
    among surviving undeclared silos.  With no undeclared silos the survivors
    are renormalized instead.  The result covers exactly ``successful``, in
    declaration order, and sums to 1.
    """
    if not successful:
        raise NoSuccessfulClients("no clients completed the round")
    unknown = successful - set(declared.silo_ids())
    if unknown:
        raise ValueError(f"successful silos missing from declaration: {sorted(unknown)}")

    declared_sum = sum(w for _, w in declared.entries if w is not None)
    if declared_sum > 1.0 + _SUM_TOL:
        raise DeclaredWeightsExceedOne(f"declared weights sum to {declared_sum}")

    dropped = [s for s, w in declared.entries if w is not None and s not in successful]
    if dropped:
        log.warning("dropping declared weights of failed silos: %s", dropped)

    survivors = [(s, w) for s, w in declared.entries if s in successful]
    present = [(s, w) for s, w in survivors if w is not None]
    absent = [s for s, w in survivors if w is None]
    present_sum = sum(w for _, w in present)

    resolved: dict[str, float] = {}
    if absent:
        share = max(0.0, 1.0 - present_sum) / len(absent)
        for s, w in present:
            resolved[s] = w
        for s in absent:
            resolved[s] = share
    else:
        if present_sum <= 0.0:
            raise NoSuccessfulClients("surviving clients carry zero total weight")
        for s, w in present:
            resolved[s] = w / present_sum
    return ClientWeights(tuple((s, resolved[s]) for s, _ in survivors))


def expected_counts(weights: ClientWeights, sizes: dict[str, int]) -> tuple[dict[str, int], int]:
    """Pre-top-up per-silo counts floor(w_i * N_i) and the target total max N_i."""
    ks = {s: math.floor(w * sizes[s]) for s, w in weights.entries}
    return ks, max(sizes.values())


def aggregate(
    forests: dict[str, RandomForest], weights: ClientWeights, seed: int
) -> RandomForest:
    """Sample a global forest from per-client forests (see module docstring).

    Deterministic for a fixed seed: silo i in declaration order samples from
    the stream (seed, STREAM_AGGREGATE, i).  Trees are shared by reference,
    never copied, so the result aliases (and never mutates) its inputs.
    """
    if not forests:
        raise EmptyForest("no forests to aggregate")
    if set(forests) != set(weights.silo_ids()) or not weights.is_resolved():
        raise ValueError("weights must be resolved and cover exactly the forest silo-ids")
    first = next(iter(forests.values()))
    for silo, f in forests.items():
        if f.n_trees == 0:
            raise EmptyForest(f"silo {silo!r} supplied an empty forest")
        if f.feature_names != first.feature_names or f.label_names != first.label_names:
            raise SchemaMismatch(f"silo {silo!r} forest disagrees on feature/label tables")

    order = weights.silo_ids()  # declaration order fixes stream assignment
    weight_of = weights.as_dict()
    sizes = {s: forests[s].n_trees for s in order}
    ks, target = expected_counts(weights, sizes)

    permutations: dict[str, list[int]] = {}
    selected: dict[str, list[int]] = {}
    for i, silo in enumerate(order):
        rng = SplitMix64(derive_seed(seed, STREAM_AGGREGATE, i))
        perm = rng.permutation(sizes[silo])
        permutations[silo] = perm
        selected[silo] = perm[: ks[silo]]

    deficit = target - sum(len(v) for v in selected.values())
    if deficit > 0:
        # descending weight, declaration order breaking ties; zero-weight silos
        # join only when everyone else is exhausted
        ranked = sorted(range(len(order)), key=lambda i: (-weight_of[order[i]], i))
        positive = [order[i] for i in ranked if weight_of[order[i]] > 0.0]
        zero = [order[i] for i in ranked if weight_of[order[i]] == 0.0]
        cursors = {s: len(selected[s]) for s in order}
        for pool in (positive, zero):
            while deficit > 0 and any(cursors[s] < sizes[s] for s in pool):
                for s in pool:
                    if deficit == 0:
                        break
                    if cursors[s] < sizes[s]:
                        selected[s].append(permutations[s][cursors[s]])
                        cursors[s] += 1
                        deficit -= 1
            if deficit == 0:
                break

    trees = []
    for silo in order:
        forest = forests[silo]
        trees.extend(forest.trees[i] for i in selected[silo])
    params = replace(first.params, n_estimators=len(trees))
    return RandomForest(tuple(trees), params, first.label_names, first.feature_names)


def uniform_aggregate(forests: dict[str, RandomForest], seed: int) -> RandomForest:
    """Equal-probability sampling: every client's weight is 1/n."""
    resolved = resolve_weights(ClientWeights.all_absent(forests.keys()), set(forests))
    return aggregate(forests, resolved, seed)


def concat_aggregate(forests: dict[str, RandomForest]) -> RandomForest:
    """Debug variant: plain concatenation of every client tree (global size
    is the SUM of client sizes, not the single-client size)."""
    if not forests:
        raise EmptyForest("no forests to aggregate")
    first = next(iter(forests.values()))
    trees: list = []
    for silo, f in forests.items():
        if f.feature_names != first.feature_names or f.label_names != first.label_names:
            raise SchemaMismatch(f"silo {silo!r} forest disagrees on feature/label tables")
        trees.extend(f.trees)
    params = replace(first.params, n_estimators=len(trees))
    return RandomForest(tuple(trees), params, first.label_names, first.feature_names)
