"""Seeded counter-based random streams.

Each consumer (weight init, augmentation, the two Monte Carlo selectors,
shuffling) asks for its own named stream so that switching a component on or
off in an ablation never shifts the draws another component sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_key(seed: int, path: str) -> int:
    digest = hashlib.sha256(f"{seed & 0xFFFFFFFFFFFFFFFF}:{path}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class Rng:
    """A Philox stream identified by ``(seed, path)``."""

    def __init__(self, seed: int = 0, path: str = ""):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = path
        self.generator = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, path)))

    def stream(self, name: str) -> "Rng":
        child = f"{self.path}/{name}" if self.path else name
        return Rng(self.seed, child)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray | int:
        return self.generator.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size=size)

    def random(self, size=None, dtype=np.float64):
        return self.generator.random(size=size, dtype=dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, options, size=None):
        return self.generator.choice(options, size=size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"
