"""Deterministic 64-bit PRNG used everywhere data order matters.

SplitMix64 expands a single u64 seed into the 256-bit state of
xoshiro256**, which drives bounded draws and Fisher-Yates shuffles.
Both algorithms are fixed bit-for-bit so that any reimplementation
(in any language) reproduces the same permutations from the same seed.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64_stream(seed: int):
    """Yield the SplitMix64 output stream for a u64 seed."""
    x = seed & MASK64
    while True:
        x = (x + 0x9E3779B97F4A7C15) & MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        yield (z ^ (z >> 31)) & MASK64


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256StarStar:
    """xoshiro256** with SplitMix64 seeding (the recommended scheme).

    State is four u64 words; `state` / `set_state` round-trip exactly so
    the generator position can be checkpointed and restored.
    """

    def __init__(self, seed: int):
        sm = splitmix64_stream(seed)
        self._s = [next(sm), next(sm), next(sm), next(sm)]

    @classmethod
    def from_state(cls, state: tuple[int, int, int, int]) -> "Xoshiro256StarStar":
        rng = cls.__new__(cls)
        rng.set_state(state)
        return rng

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def set_state(self, state) -> None:
        if len(state) != 4:
            raise ValueError("xoshiro256** state must be 4 u64 words")
        self._s = [w & MASK64 for w in state]

    def state_bytes(self) -> bytes:
        return b"".join(w.to_bytes(8, "little") for w in self._s)

    def set_state_bytes(self, raw: bytes) -> None:
        if len(raw) != 32:
            raise ValueError(f"expected 32 state bytes, got {len(raw)}")
        self._s = [int.from_bytes(raw[i : i + 8], "little") for i in range(0, 32, 8)]

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_below(self, bound: int) -> int:
        """Unbiased draw from [0, bound) via masked rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        mask = (1 << (bound - 1).bit_length()) - 1
        while True:
            v = self.next_u64() & mask
            if v < bound:
                return v

    def shuffle(self, a: np.ndarray) -> None:
        """In-place Fisher-Yates (descending) on a 1-D array."""
        for i in range(len(a) - 1, 0, -1):
            j = self.next_below(i + 1)
            a[i], a[j] = a[j], a[i]


def global_permute(n: int, seed: int) -> np.ndarray:
    """Deterministic permutation of [0, n): Fisher-Yates over xoshiro256**."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    perm = np.arange(n, dtype=np.int64)
    Xoshiro256StarStar(seed).shuffle(perm)
    return perm
