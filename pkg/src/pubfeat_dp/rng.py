"""Keyed random substreams.

Every random draw in the package is taken from a generator derived from
``(seed, *key)``, so the value of a draw depends only on its key and never on
the order in which keys are visited.
"""

from __future__ import annotations

import zlib
from collections import Counter
from typing import Hashable

import numpy as np

_FIELD_LIMIT = 2**32


def _encode(part: Hashable) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        value = int(part)
        if not 0 <= value < _FIELD_LIMIT:
            raise ValueError(f"integer key component out of range: {value}")
        return value
    if isinstance(part, str):
        # Offset keeps string keys disjoint from small integers.
        return _FIELD_LIMIT - 1 - (zlib.crc32(part.encode("utf-8")) >> 1)
    raise TypeError(f"unsupported key component {part!r}")


class NoiseSource:
    """Factory for reproducible keyed generators with a Gaussian draw counter.

    Forks share the counter of their parent, so a single source handed to a
    trainer accounts for every Gaussian scalar drawn on its behalf.
    """

    def __init__(self, seed: int, prefix: tuple = (), _ledger: Counter | None = None):
        self.seed = int(seed)
        self.prefix = tuple(prefix)
        self._ledger = Counter() if _ledger is None else _ledger

    def fork(self, *key: Hashable) -> "NoiseSource":
        return NoiseSource(self.seed, self.prefix + key, self._ledger)

    def generator(self, *key: Hashable) -> np.random.Generator:
        spawn_key = tuple(_encode(p) for p in self.prefix + key)
        seq = np.random.SeedSequence(self.seed, spawn_key=spawn_key)
        return np.random.Generator(np.random.PCG64(seq))

    def normal(self, key: tuple, size) -> np.ndarray:
        """Standard normal draws from the substream named by ``key``."""
        out = self.generator(*key).standard_normal(size)
        self._ledger["gaussian"] += out.size
        if key:
            self._ledger[("field", str(key[-1]))] += out.size
        return out

    @property
    def draws(self) -> int:
        """Total Gaussian scalars drawn through this source and its forks."""
        return self._ledger["gaussian"]

    def field_draws(self, field: str) -> int:
        return self._ledger[("field", field)]
