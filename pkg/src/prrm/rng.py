"""Deterministic 64-bit random number generator.

The generator is SplitMix64: the state advances by the 64-bit golden-gamma
constant 0x9E3779B97F4A7C15 and each output passes through the
xorshift-multiply finalizer with constants 0xBF58476D1CE4E5B9 and
0x94D049BB133111EB. The same seed produces the same sequence on every
platform; bulk draws are vectorized in uint64 numpy arithmetic and agree
bit-for-bit with scalar draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, label: str) -> int:
    """Stable sub-stream seed for a named purpose (e.g. "data/A/train")."""
    tag = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")
    return _mix((seed & _MASK) ^ tag)


class Rng:
    """SplitMix64 stream with a serializable 64-bit state."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK

    @classmethod
    def from_state(cls, state: int) -> "Rng":
        rng = cls(0)
        rng.state = state & _MASK
        return rng

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        return _mix(self.state)

    def fill_u64(self, n: int) -> np.ndarray:
        """Next n outputs as uint64, advancing the state by n."""
        if n < 0:
            raise ValueError("n must be nonnegative")
        start = np.uint64(self.state)
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = start + idx * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & _MASK
        return z

    def uniform(self, lo: float, hi: float, shape=(), dtype=np.float32) -> np.ndarray:
        """Uniform draw in [lo, hi); computed in float64, cast to dtype."""
        n = int(np.prod(shape)) if shape else 1
        bits = self.fill_u64(n)
        u = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = (lo + u * (hi - lo)).astype(dtype)
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        """Gaussian draw via Box-Muller on float64 uniforms."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        bits = self.fill_u64(2 * pairs)
        u = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u1 = 1.0 - u[:pairs]  # in (0, 1], keeps log finite
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = (mean + std * z).astype(dtype)
        return out.reshape(shape) if shape else out[0]

    def below(self, n: int) -> int:
        """Integer in [0, n). Modulo bias is negligible for n << 2**64."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
