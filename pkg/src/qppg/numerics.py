"""Deterministic random numbers and finite-difference gradient checks.

All randomness in the package flows from :class:`Rng64`, a SplitMix64
generator. Bulk draws are vectorised with numpy but produce exactly the
same stream as repeated scalar calls, so results never depend on whether a
caller asked for one value or a million.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1
_INV_2_53 = 1.0 / float(1 << 53)


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class Rng64:
    """SplitMix64 state. Identical seeds give identical streams everywhere."""

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        return _mix(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as a uint64 array (same stream as next_u64)."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        # state_k = state_0 + k * golden (mod 2**64); numpy uint64 arithmetic wraps.
        with np.errstate(over="ignore"):
            k = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + k * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK
        return z

    def uniform(self, n: int | None = None):
        """Uniform draws in (0, 1] built from the top 53 bits."""
        if n is None:
            return ((self.next_u64() >> 11) + 1) * _INV_2_53
        u = self.u64_array(n)
        return ((u >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53

    def normal(self, shape=None):
        """Standard normal variates (Box-Muller, cosine branch, two uniforms each)."""
        if shape is None:
            u1 = self.uniform()
            u2 = self.uniform()
            return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        n = int(np.prod(shape))
        u = self.uniform(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log(u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.u64_array(n)
        return np.argsort(keys, kind="stable")

    def spawn(self) -> "Rng64":
        """Child generator seeded with the parent's next output."""
        return Rng64(self.next_u64())


def next_u64(rng: Rng64) -> int:
    return rng.next_u64()


def rand_normal(rng: Rng64) -> float:
    return rng.normal()


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function, evaluated in float64."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
