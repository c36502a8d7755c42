"""Flat-array CART trees and the numba growth/prediction kernels.

Trees are stored as parallel node arrays with the root at index 0 and all
child indices pointing forward, which makes serialization, validation and
prediction straightforward.  Growth is depth-first with an explicit stack;
split search follows classic CART: Gini impurity, candidate thresholds at
midpoints between consecutive distinct sorted values, and a per-node random
feature subset.  Constant features do not consume the max_features budget,
so a split is found whenever any feature still varies inside the node.

All randomness comes from a SplitMix64 stream seeded per tree; the kernel
reproduces the exact stream of fedrf.rng.SplitMix64 (verified by test).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, uint64

_GOLDEN = uint64(0x9E3779B97F4A7C15)
_MIX_A = uint64(0xBF58476D1CE4E5B9)
_MIX_B = uint64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> uint64(30))) * _MIX_A
    z = (z ^ (z >> uint64(27))) * _MIX_B
    return z ^ (z >> uint64(31))


@njit(cache=True, inline="always")
def _next_u64(state):
    state = state + _GOLDEN
    return state, _mix64(state)


@njit(cache=True, inline="always")
def _randbelow(state, n):
    """Unbiased integer in [0, n); mirrors SplitMix64.randbelow exactly."""
    n64 = uint64(n)
    r = (uint64(0) - n64) % n64
    while True:
        state, u = _next_u64(state)
        if r == uint64(0) or u < (uint64(0) - r):
            return state, np.int64(u % n64)


@njit(cache=True)
def _rng_stream(seed, n):
    """Expose the kernel's raw stream for cross-checking against rng.py."""
    state = uint64(seed)
    out = np.empty(n, np.uint64)
    for i in range(n):
        state, u = _next_u64(state)
        out[i] = u
    return out


@njit(cache=True, nogil=True)
def _grow(X, y, n_classes, max_features, max_depth, min_samples_split, bootstrap, seed):
    n, n_feat = X.shape
    state = uint64(seed)

    samples = np.empty(n, np.int64)
    if bootstrap:
        for i in range(n):
            state, v = _randbelow(state, n)
            samples[i] = v
    else:
        for i in range(n):
            samples[i] = i

    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap, np.float64)
    left = np.zeros(cap, np.int32)
    right = np.zeros(cap, np.int32)
    counts = np.zeros((cap, n_classes), np.int64)

    # task = (start, end, depth, parent, is_left)
    stack = np.empty((cap + 2, 5), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = n
    stack[0, 2] = 0
    stack[0, 3] = -1
    stack[0, 4] = 0
    top = 1
    n_nodes = 0

    feat_order = np.empty(n_feat, np.int64)
    xbuf = np.empty(n, np.float64)
    ybuf = np.empty(n, np.int64)
    part = np.empty(n, np.int64)
    cls = np.zeros(n_classes, np.int64)
    left_cnt = np.zeros(n_classes, np.int64)

    while top > 0:
        top -= 1
        start = stack[top, 0]
        end = stack[top, 1]
        depth = stack[top, 2]
        parent = stack[top, 3]
        is_left = stack[top, 4]

        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if is_left == 1:
                left[parent] = node
            else:
                right[parent] = node

        m = end - start
        for c in range(n_classes):
            cls[c] = 0
        for i in range(start, end):
            cls[y[samples[i]]] += 1
        maxc = np.int64(0)
        for c in range(n_classes):
            counts[node, c] = cls[c]
            if cls[c] > maxc:
                maxc = cls[c]

        if maxc == m or m < min_samples_split or (max_depth >= 0 and depth >= max_depth):
            continue  # leaf: feature stays -1

        for j in range(n_feat):
            feat_order[j] = j
        for i in range(m):
            ybuf[i] = y[samples[start + i]]

        best_score = np.inf  # -(sqL/nL + sqR/nR); lower is better at fixed m
        best_feat = -1
        best_thr = 0.0
        examined = 0

        sq_total = np.int64(0)
        for c in range(n_classes):
            sq_total += cls[c] * cls[c]

        for j in range(n_feat):
            # lazily shuffled feature order (partial Fisher-Yates step)
            state, r = _randbelow(state, n_feat - j)
            k = j + r
            tmpf = feat_order[j]
            feat_order[j] = feat_order[k]
            feat_order[k] = tmpf
            fi = feat_order[j]

            for i in range(m):
                xbuf[i] = X[samples[start + i], fi]
            order = np.argsort(xbuf[:m])

            if xbuf[order[0]] == xbuf[order[m - 1]]:
                continue  # constant feature: no budget consumed
            examined += 1

            for c in range(n_classes):
                left_cnt[c] = 0
            sq_l = np.int64(0)
            sq_r = sq_total
            for i in range(m - 1):
                c = ybuf[order[i]]
                rc = cls[c] - left_cnt[c]  # right count before the move
                sq_l += 2 * left_cnt[c] + 1
                sq_r -= 2 * rc - 1
                left_cnt[c] += 1
                lo = xbuf[order[i]]
                hi = xbuf[order[i + 1]]
                if hi > lo:
                    n_l = i + 1
                    n_r = m - n_l
                    score = -(sq_l / n_l + sq_r / n_r)
                    if score < best_score:
                        thr = lo + (hi - lo) / 2.0
                        if thr >= hi:  # rounding guard: keep hi strictly right
                            thr = lo
                        best_score = score
                        best_feat = fi
                        best_thr = thr

            if examined >= max_features:
                break

        if best_feat < 0:
            continue  # every feature constant: leaf

        n_l = 0
        for i in range(start, end):
            s = samples[i]
            if X[s, best_feat] <= best_thr:
                part[n_l] = s
                n_l += 1
        n_r = 0
        for i in range(start, end):
            s = samples[i]
            if X[s, best_feat] > best_thr:
                part[n_l + n_r] = s
                n_r += 1
        for i in range(m):
            samples[start + i] = part[i]

        feature[node] = best_feat
        threshold[node] = best_thr

        # push right first so the left subtree is laid out immediately after
        stack[top, 0] = start + n_l
        stack[top, 1] = end
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 0
        top += 1
        stack[top, 0] = start
        stack[top, 1] = start + n_l
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 1
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        counts[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def _predict_votes(feat, thr, left, right, leaf_class, offsets, X, n_classes):
    n = X.shape[0]
    votes = np.zeros((n, n_classes), np.int64)
    for t in range(offsets.shape[0] - 1):
        base = offsets[t]
        for i in range(n):
            node = np.int64(0)
            while feat[base + node] >= 0:
                if X[i, feat[base + node]] <= thr[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            votes[i, leaf_class[base + node]] += 1
    return votes


@dataclass(frozen=True)
class DecisionTree:
    """One trained CART tree as immutable flat node arrays (root at 0)."""

    feature: np.ndarray      # int32, -1 marks a leaf
    threshold: np.ndarray    # float64, go left iff value <= threshold
    left: np.ndarray         # int32 child indices, forward-pointing
    right: np.ndarray
    class_counts: np.ndarray  # (n_nodes, n_classes) int64
    n_features: int

    def __post_init__(self):
        for name in ("feature", "threshold", "left", "right", "class_counts"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_classes(self) -> int:
        return self.class_counts.shape[1]

    def structure_error(self) -> str | None:
        """None when the node arrays form a valid forward-pointing binary tree
        covering the array exactly; otherwise a description of the violation."""
        n = self.n_nodes
        if n == 0:
            return "tree has no nodes"
        seen = np.zeros(n, dtype=np.bool_)
        stack = [0]
        visited = 0
        while stack:
            i = stack.pop()
            if i < 0 or i >= n:
                return f"child index {i} out of range"
            if seen[i]:
                return f"node {i} reached twice"
            seen[i] = True
            visited += 1
            f = int(self.feature[i])
            if f >= 0:
                if f >= self.n_features:
                    return f"node {i}: feature index {f} >= {self.n_features}"
                l, r = int(self.left[i]), int(self.right[i])
                if l <= i or r <= i:
                    return f"node {i}: child indices must point forward"
                stack.append(r)
                stack.append(l)
            else:
                if int(self.class_counts[i].sum()) < 1:
                    return f"leaf {i}: class_counts sum to 0"
                if int(self.left[i]) != 0 or int(self.right[i]) != 0 or self.threshold[i] != 0.0:
                    return f"leaf {i}: non-canonical leaf fields"
        if visited != n:
            return f"only {visited} of {n} nodes reachable from the root"
        return None


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    max_features: int,
    max_depth: int | None,
    min_samples_split: int,
    bootstrap: bool,
    seed: int,
) -> DecisionTree:
    """Grow one CART tree; ``seed`` names the tree's private RNG stream."""
    feature, threshold, left, right, counts = _grow(
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.int64),
        n_classes,
        max_features,
        -1 if max_depth is None else int(max_depth),
        min_samples_split,
        bootstrap,
        np.uint64(seed & ((1 << 64) - 1)),
    )
    return DecisionTree(feature, threshold, left, right, counts, n_features=X.shape[1])


def trees_equal(a: DecisionTree, b: DecisionTree) -> bool:
    """Structural equality over node arrays (bit-exact thresholds)."""
    return (
        a.n_features == b.n_features
        and a.feature.shape == b.feature.shape
        and a.class_counts.shape == b.class_counts.shape
        and bool(np.array_equal(a.feature, b.feature))
        and a.threshold.tobytes() == b.threshold.tobytes()
        and bool(np.array_equal(a.left, b.left))
        and bool(np.array_equal(a.right, b.right))
        and bool(np.array_equal(a.class_counts, b.class_counts))
    )


def pack_trees(trees) -> tuple[np.ndarray, ...]:
    """Concatenate per-tree arrays for the batched prediction kernel."""
    offsets = np.zeros(len(trees) + 1, dtype=np.int64)
    for i, t in enumerate(trees):
        offsets[i + 1] = offsets[i] + t.n_nodes
    feat = np.concatenate([t.feature for t in trees])
    thr = np.concatenate([t.threshold for t in trees])
    left = np.concatenate([t.left for t in trees])
    right = np.concatenate([t.right for t in trees])
    # per-node majority class; np.argmax takes the lowest id on ties
    leaf_class = np.concatenate(
        [np.argmax(t.class_counts, axis=1).astype(np.int32) for t in trees]
    )
    return feat, thr, left, right, leaf_class, offsets


def votes_matrix(trees, X: np.ndarray, n_classes: int) -> np.ndarray:
    """(n_rows, n_classes) vote counts across ``trees`` for each row of X."""
    feat, thr, left, right, leaf_class, offsets = pack_trees(trees)
    return _predict_votes(
        feat, thr, left, right, leaf_class, offsets,
        np.ascontiguousarray(X, dtype=np.float64), n_classes,
    )


def tree_predict(tree: DecisionTree, X: np.ndarray) -> np.ndarray:
    """Per-row leaf argmax for a single tree (ties -> lowest class-id)."""
    votes = votes_matrix([tree], X, tree.n_classes)
    return np.argmax(votes, axis=1).astype(np.int64)
