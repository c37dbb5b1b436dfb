"""Counter-based deterministic random number generator.

All randomness in the toolkit flows through :class:`CounterRng`, a SplitMix64
stream: draw ``i`` of a stream seeded with ``s`` is ``mix64(s + (i+1)*GOLDEN)``
where ``mix64`` is the SplitMix64 finalizer. Because each output is a pure
function of (seed, counter), any draw can be reproduced or vectorized without
carrying mutable state beyond the counter, and independent substreams are
derived by hashing a textual tag into a fresh seed.

The generator is not cryptographic; it exists to make every run bit-for-bit
repeatable across processes and platforms.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over uint64 arrays (wrapping multiply)."""
    with np.errstate(over="ignore"):
        z = x.astype(np.uint64, copy=True)
        z ^= z >> np.uint64(30)
        z *= _MIX1
        z ^= z >> np.uint64(27)
        z *= _MIX2
        z ^= z >> np.uint64(31)
        return z


def fnv1a64(tag: str) -> int:
    """FNV-1a hash of a tag string; stable across platforms and runs."""
    h = 0xCBF29CE484222325
    for byte in tag.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class CounterRng:
    """SplitMix64 counter stream with numpy-vectorized draws."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def substream(self, tag: str) -> "CounterRng":
        """Derive an independent stream; pure function of (seed, tag)."""
        return CounterRng(int(mix64(np.array([self.seed ^ np.uint64(fnv1a64(tag))]))[0]))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(self.seed + idx * _GOLDEN)

    def uniform(self, shape) -> np.ndarray:
        """float64 uniforms in (0, 1); never returns exactly 0."""
        n = int(np.prod(shape)) if shape else 1
        bits = self._raw(n)
        u = ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
        return u.reshape(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """float32 Gaussians via Box-Muller on uniform pairs."""
        n = int(np.prod(shape)) if shape else 1
        u1 = self.uniform((n,))
        u2 = self.uniform((n,))
        g = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (g * std).astype(np.float32).reshape(shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        """int64 draws in [low, high); modulo reduction (bias < 2**-40 here)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(high - low)
        vals = (self._raw(n) % span).astype(np.int64) + low
        return vals.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n > 1:
            js = self._raw(n - 1)
            for i in range(n - 1, 0, -1):
                j = int(js[n - 1 - i] % np.uint64(i + 1))
                perm[i], perm[j] = perm[j], perm[i]
        return perm
