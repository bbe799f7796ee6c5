"""SplitMix64 generator and seed-mixing helpers.

Everything random in the audit (scope sampling, substitutions, bootstrap
indices, synthetic models) is driven from here so that a run is fully
determined by its seeds and can be re-implemented bit-exactly elsewhere.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64_finalize(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def splitmix64_mix(*words: int) -> int:
    """Fold any number of 64-bit words into one well-mixed seed.

    Order matters: ``mix(a, b) != mix(b, a)`` in general.
    """
    acc = 0
    for w in words:
        acc = splitmix64_finalize((acc ^ (w & MASK64)) + GOLDEN_GAMMA)
    return acc


def stable_hash64(text: str) -> int:
    """FNV-1a over the UTF-8 bytes. Stable across processes, unlike ``hash``."""
    h = _FNV_OFFSET
    for b in text.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


class SplitMix64:
    """Sequential SplitMix64 stream."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return splitmix64_finalize(self.state)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 bits of resolution."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Integer in [0, n) by modulo reduction."""
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        return self.next_u64() % n


def splitmix64_block(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of ``SplitMix64(seed)`` as a uint64 array."""
    k = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + k * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        z = z ^ (z >> np.uint64(31))
    return z


def derive(seed: int, *tags: int) -> int:
    """Seed of an independent sub-stream identified by ``tags``."""
    return splitmix64_mix(seed, *tags)
