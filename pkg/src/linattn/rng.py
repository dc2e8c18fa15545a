"""Deterministic, splittable, counter-based random number generation.

Every output word is a pure function of (seed, counter), so identical seeds
produce identical streams on every platform, and child streams can be forked
without sharing mutable state.  The construction is a keyed SplitMix64:

    word(k) = mix64(seed + (k + 1) * GOLDEN)   mod 2**64

with the SplitMix64 finalizer

    mix64(z): z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
              z ^= z >> 27;  z *= 0x94D049BB133111EB
              z ^= z >> 31

Constants (fixed; any port must reproduce them exactly):
    GOLDEN     = 0x9E3779B97F4A7C15   (2**64 / golden ratio)
    SPLIT_SALT = 0x5851F42D4C957F2D   (keyed into child seeds only)

Derived values:
    uniform  = (word >> 11) * 2**-53             in [0, 1)
    normal   = Box-Muller on uniform pairs, u1 shifted to (0, 1]
    child(i) = mix64((seed ^ SPLIT_SALT) + (i + 1) * GOLDEN)
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
SPLIT_SALT = 0x5851F42D4C957F2D
_MASK = (1 << 64) - 1
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int, modulo 2**64."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MUL1) & _MASK
    z = ((z ^ (z >> 27)) * _MUL2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MUL1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MUL2)
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """Counter-based random stream identified by a 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self.counter = 0

    def split(self, index: int) -> "Rng":
        """Fork an independent child stream; pure function of (seed, index)."""
        return Rng(_mix64((self.seed ^ SPLIT_SALT) + (index + 1) * GOLDEN))

    def _words(self, n: int) -> np.ndarray:
        ks = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64_array(np.uint64(self.seed) + ks * np.uint64(GOLDEN))

    def next_u64(self) -> int:
        self.counter += 1
        return _mix64((self.seed + self.counter * GOLDEN) & _MASK)

    def uniform(self, shape=()) -> np.ndarray:
        """Float64 samples in [0, 1), 53 bits of entropy each."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Standard Box-Muller; consumes two words per pair of samples."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        w = self._words(2 * pairs)
        # u1 in (0, 1] so log() is finite
        u1 = ((w[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (w[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = mean + std * z
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, shape=()):
        """Uniform ints in [low, high). Bias for tiny ranges is < 2**-45."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape)
        return (np.floor(u * (high - low)).astype(np.int64) + low) if shape else int(u * (high - low)) + low

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def shuffle(self, items: list) -> list:
        return [items[i] for i in self.permutation(len(items))]
