"""Seeded, splittable random streams.

Each stream is a Philox (counter-based) generator whose 128-bit key is a
hash of the root seed and the split path, so ``Rng(7).split("local", 3)``
yields the same draws no matter what other streams did before.
"""
from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        self._gen = None

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path!r})"

    def split(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(str(label) for label in labels))

    @property
    def key(self) -> int:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.seed.to_bytes(8, "little"))
        for label in self.path:
            raw = label.encode("utf-8")
            h.update(len(raw).to_bytes(4, "little"))
            h.update(raw)
        return int.from_bytes(h.digest(), "little")

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(key=self.key))
        return self._gen

    # thin delegation; everything else goes through .generator
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def dirichlet(self, alpha, size=None):
        return self.generator.dirichlet(alpha, size)
