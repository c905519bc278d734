"""SplitMix64 generator and the derived draws used for fixtures and forests.

Every random decision in the package goes through this module so that traffic
fixtures and trained forests are reproducible bit-for-bit on any host:

* ``uniform()``   -- top 53 bits of the next output, scaled by 2**-53, in [0, 1).
* ``randbelow(n)`` -- next output modulo n.
* ``gauss()``     -- Box-Muller, cosine branch only: one normal per two outputs.
* ``derive_seed(seed, *path)`` -- sub-seeding; folds each path element into the
  seed through the SplitMix64 finalizer.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *path: int) -> int:
    s = seed & MASK64
    for item in path:
        s = mix64(s ^ mix64((item + GAMMA) & MASK64))
    return s


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def gauss(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        return mu + sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)

    def randbelow_many(self, n: int, count: int) -> np.ndarray:
        """``count`` successive ``randbelow(n)`` draws, vectorized."""
        if n <= 0:
            raise ValueError("n must be positive")
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * GAMMA) & MASK64
        return (z % np.uint64(n)).astype(np.int64)

    def sample_without_replacement(self, population: int, k: int) -> list[int]:
        """First ``k`` slots of a partial Fisher-Yates shuffle of ``range(population)``, sorted."""
        pool = list(range(population))
        for i in range(k):
            j = i + self.randbelow(population - i)
            pool[i], pool[j] = pool[j], pool[i]
        return sorted(pool[:k])
