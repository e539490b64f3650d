"""Deterministic random number generation.

xoshiro256** with splitmix64 seed expansion, implemented on Python integers
so the 64-bit stream is bit-exact on every platform. Gaussians come from
Box-Muller, consuming exactly two 64-bit draws per pair of values.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64_stream(seed: int, count: int) -> list[int]:
    """First `count` outputs of splitmix64 for a 64-bit seed."""
    state = seed & _MASK64
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


class RngState:
    """xoshiro256** generator state, seeded via splitmix64 expansion."""

    __slots__ = ("s0", "s1", "s2", "s3", "_spare")

    def __init__(self, seed: int):
        self.s0, self.s1, self.s2, self.s3 = splitmix64_stream(seed, 4)
        self._spare: float | None = None  # unused half of a Box-Muller pair

    def clone(self) -> "RngState":
        other = object.__new__(RngState)
        other.s0, other.s1, other.s2, other.s3 = self.s0, self.s1, self.s2, self.s3
        other._spare = self._spare
        return other

    @property
    def state(self) -> tuple[int, int, int, int]:
        return (self.s0, self.s1, self.s2, self.s3)

    def next_u64(self) -> int:
        s1 = self.s1
        r = (s1 * 5) & _MASK64
        r = (((r << 7) | (r >> 57)) & _MASK64) * 9 & _MASK64
        t = (s1 << 17) & _MASK64
        s2 = self.s2 ^ self.s0
        s3 = self.s3 ^ s1
        s1 ^= s2
        s0 = self.s0 ^ s3
        s2 ^= t
        self.s0, self.s1, self.s2 = s0, s1, s2
        self.s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        return r

    def next_u64_block(self, count: int) -> list[int]:
        """Batched next_u64; one tight loop, identical stream."""
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        out = []
        append = out.append
        for _ in range(count):
            r = (s1 * 5) & _MASK64
            append((((r << 7) | (r >> 57)) & _MASK64) * 9 & _MASK64)
            t = (s1 << 17) & _MASK64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return out

    def uniform01(self) -> float:
        """Uniform double in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint_below(self, bound: int) -> int:
        """Uniform integer in [0, bound); bound must be positive."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return int(self.uniform01() * bound)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates permutation driven by this stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def normal_pair(self) -> tuple[float, float]:
        """One Box-Muller pair; consumes exactly two 64-bit draws."""
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53  # (0, 1]
        u2 = (self.next_u64() >> 11) * 2.0**-53  # [0, 1)
        radius = math.sqrt(-2.0 * math.log(u1))
        angle = 2.0 * math.pi * u2
        return radius * math.cos(angle), radius * math.sin(angle)


def _normal_stream(rng: RngState, count: int) -> np.ndarray:
    """`count` standard normals; pairs drawn in order, spare value cached."""
    values = np.empty(count, dtype=np.float64)
    idx = 0
    if rng._spare is not None and count > 0:
        values[0] = rng._spare
        rng._spare = None
        idx = 1
    pairs = (count - idx + 1) // 2
    if pairs > 0:
        raw = rng.next_u64_block(2 * pairs)
        u1 = (np.asarray(raw[0::2], dtype=np.uint64) >> np.uint64(11)).astype(np.float64)
        u2 = (np.asarray(raw[1::2], dtype=np.uint64) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * 2.0**-53
        u2 = u2 * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z0 = radius * np.cos(angle)
        z1 = radius * np.sin(angle)
        need = count - idx
        interleaved = np.empty(2 * pairs, dtype=np.float64)
        interleaved[0::2] = z0
        interleaved[1::2] = z1
        values[idx:] = interleaved[:need]
        if need < 2 * pairs:
            rng._spare = float(interleaved[need])
    return values


def rand_uniform01(rng: RngState, dims, dtype=np.float32) -> np.ndarray:
    """Uniform [0, 1) tensor from the xoshiro stream (53-bit mantissas)."""
    dims = tuple(int(d) for d in dims)
    count = int(np.prod(dims)) if dims else 1
    raw = rng.next_u64_block(count)
    vals = (np.asarray(raw, dtype=np.uint64) >> np.uint64(11)).astype(np.float64)
    return (vals * 2.0**-53).astype(dtype).reshape(dims)


def rand_normal(rng: RngState, dims, mean: float = 0.0, std: float = 1.0,
                dtype=np.float32) -> np.ndarray:
    """Gaussian tensor from the xoshiro stream via Box-Muller."""
    if std < 0:
        raise ValueError("std must be nonnegative")
    dims = tuple(int(d) for d in dims)
    count = int(np.prod(dims)) if dims else 1
    if std == 0.0:
        return np.full(dims, mean, dtype=dtype)
    z = _normal_stream(rng, count)
    return (mean + std * z).astype(dtype).reshape(dims)


def rand_trunc_normal(rng: RngState, dims, mean: float = 0.0, std: float = 1.0,
                      lo: float = -2.0, hi: float = 2.0,
                      dtype=np.float32) -> np.ndarray:
    """Gaussian tensor rejection-sampled into [lo, hi] (bounds on the values)."""
    if lo >= hi:
        raise ValueError(f"invalid truncation interval [{lo}, {hi})")
    if std < 0:
        raise ValueError("std must be nonnegative")
    dims = tuple(int(d) for d in dims)
    count = int(np.prod(dims)) if dims else 1
    if std == 0.0:
        if not (lo <= mean <= hi):
            raise ValueError("mean outside truncation interval with std=0")
        return np.full(dims, mean, dtype=dtype)
    accepted = np.empty(count, dtype=np.float64)
    filled = 0
    while filled < count:
        batch = max(count - filled, 32)
        vals = mean + std * _normal_stream(rng, batch)
        good = vals[(vals >= lo) & (vals <= hi)]
        take = min(good.size, count - filled)
        accepted[filled:filled + take] = good[:take]
        filled += take
    return accepted.astype(dtype).reshape(dims)
