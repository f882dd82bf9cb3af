"""Seedable, splittable randomness built on the counter-based Philox generator.

Every stochastic component takes a stream derived from the experiment seed
by name, so reruns with the same seed are bit-identical and adding a
consumer never perturbs the draws of the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "big")


class SeedStream:
    """A named node in a deterministic tree of random streams."""

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self._path = tuple(_path)

    def child(self, name: str) -> "SeedStream":
        return SeedStream(self.seed, self._path + (_name_key(name),))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
        return np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"SeedStream(seed={self.seed}, path={self._path})"
