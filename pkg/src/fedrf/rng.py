"""Deterministic, platform-portable randomness built on SplitMix64.

Every random decision in fedrf draws from a SplitMix64 stream whose seed is
derived from a user seed plus an integer path.  The derivation scheme:

    h0 = mix64(seed)
    h_{i+1} = mix64(h_i XOR mix64(domain_or_index_i))

where ``mix64`` is the SplitMix64 finalizer.  Streams are identified by a
domain constant followed by indices, e.g. the RNG for tree ``i`` of a forest
seeded with ``s`` is ``SplitMix64(derive_seed(s, STREAM_TREE, i))``.  Because
each tree owns a pre-derived stream, serial and parallel training produce
identical forests, and results are reproducible across platforms (only
integer ops and IEEE-754 doubles are involved).
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Stream domains.  Values are arbitrary but frozen: changing them changes
# every derived stream and therefore every trained model.
STREAM_TREE = 1        # per-tree growth (bootstrap + split feature draws)
STREAM_AGGREGATE = 2   # per-silo tree sampling during aggregation
STREAM_ROUND = 3       # per-round coordinator seed
STREAM_SILO = 4        # per-silo training seed within a round
STREAM_PARTITION = 5   # dataset shuffling for the test/train split
STREAM_SUBSAMPLE = 6   # sample_fraction row subsampling at a datasite


def mix64(z: int) -> int:
    """SplitMix64 finalizer (Steele, Lea & Flood's variant)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, *path: int) -> int:
    """Fold a stream path into a 64-bit child seed."""
    h = mix64(seed)
    for p in path:
        h = mix64(h ^ mix64(p))
    return h


class SplitMix64:
    """Sequential SplitMix64 generator.

    state_{n+1} = state_n + GOLDEN; output_n = mix64(state_{n+1}).
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return mix64(self._state)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (unbiased)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def random(self) -> float:
        """Uniform double in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randbelow(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def permutation(self, n: int) -> list[int]:
        out = list(range(n))
        self.shuffle(out)
        return out

    def sample_without_replacement(self, n: int, k: int) -> list[int]:
        """First k entries of a Fisher-Yates permutation of range(n)."""
        if not 0 <= k <= n:
            raise ValueError(f"k={k} out of range for n={n}")
        out = list(range(n))
        # Forward partial Fisher-Yates: positions [0, k) are finalized.
        for i in range(k):
            j = i + self.randbelow(n - i)
            out[i], out[j] = out[j], out[i]
        return out[:k]
