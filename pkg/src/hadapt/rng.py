"""Deterministic pseudo-random streams.

The generator is xoshiro256** with its four words of state expanded from a
64-bit seed by splitmix64. Both algorithms are small enough to restate here
so that a port in any language can reproduce the exact streams:

splitmix64 (state s, all arithmetic mod 2**64):
    s += 0x9E3779B97F4A7C15
    z  = s
    z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
    output = z ^ (z >> 31)

xoshiro256** (state s0..s3, rotl(x, k) = 64-bit rotate left):
    output = rotl(s1 * 5, 7) * 9
    t   = s1 << 17
    s2 ^= s0;  s3 ^= s1;  s1 ^= s2;  s0 ^= s3
    s2 ^= t
    s3  = rotl(s3, 45)

State expansion: starting from the raw seed, four consecutive splitmix64
outputs become s0..s3.

Stream derivation: derive_seed(seed, label) hashes the UTF-8 bytes of the
label with 64-bit FNV-1a, xors the digest into the seed, and passes the
result through one splitmix64 step. Distinct labels give statistically
independent child streams, and the mapping is pure, so the overall layout
of randomness in a run is a function of the root seed alone.

uniform() maps a 64-bit draw to [0, 1) as (u >> 11) * 2**-53, and the
integer helpers use rejection sampling, so sequences of draws are exact
integer arithmetic and therefore identical across platforms. normal() uses
the Box-Muller transform (one value per call, no caching).
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once. Returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def derive_seed(seed: int, label: str) -> int:
    """Derive a child seed from (seed, label). Pure and order-independent."""
    mixed = (seed ^ fnv1a64(label.encode("utf-8"))) & _MASK
    _, out = splitmix64(mixed)
    return out


class Rng:
    """xoshiro256** stream seeded via splitmix64 expansion."""

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        s = self.seed
        words = []
        for _ in range(4):
            s, out = splitmix64(s)
            words.append(out)
        self._s = words

    def split(self, label: str) -> "Rng":
        """Child stream for the given label; does not disturb this stream."""
        return Rng(derive_seed(self.seed, label))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _MASK
        out = (((x << 7 | x >> 57) & _MASK) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << 45 | s3 >> 19) & _MASK
        self._s = [s0, s1, s2, s3]
        return out

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 1.1102230246251565e-16  # 2**-53

    def randrange(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randrange needs a positive bound")
        threshold = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < threshold:
                return u % n

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi], both ends inclusive."""
        if hi < lo:
            raise ValueError("empty range")
        return lo + self.randrange(hi - lo + 1)

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates, high index down."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randrange(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def sample(self, seq, k: int) -> list:
        """k distinct elements (by position), order randomized."""
        if k > len(seq):
            raise ValueError("sample larger than population")
        pool = list(seq)
        out = []
        for i in range(k):
            j = self.randint(i, len(pool) - 1)
            pool[i], pool[j] = pool[j], pool[i]
            out.append(pool[i])
        return out

    def normal(self) -> float:
        """Standard normal via Box-Muller. One output per call."""
        u1 = self.uniform()
        while u1 == 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def truncated_normal(self, std: float, clip: float = 2.0) -> float:
        """Normal(0, std) resampled until |z| <= clip standard deviations."""
        z = self.normal()
        while abs(z) > clip:
            z = self.normal()
        return z * std

    def truncated_normals(self, n: int, std: float, clip: float = 2.0) -> np.ndarray:
        """Array of n truncated normal draws (loop kept in one frame for speed)."""
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.truncated_normal(std, clip)
        return out
