"""Counter-based random number generation.

Built on numpy's Philox bit generator: a keyed counter-based generator, so
identical (seed, call sequence) pairs produce identical streams on every
platform, and substreams keyed off distinct indices never overlap.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Reproducible normal/uniform sampler with cheap disjoint substreams."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(
            np.random.Philox(key=(self.seed & 0xFFFFFFFFFFFFFFFF) ^ (self.stream << 1))
        )

    def substream(self, index: int) -> "Rng":
        """A statistically independent stream; deterministic in (seed, index)."""
        return Rng(self.seed, self.stream * 0x9E3779B9 + index + 1)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def choice(self, n, size, replace=False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def gauss_sample(rng: Rng, shape) -> np.ndarray:
    """I.i.d. standard normal draws, reproducible per (seed, call order)."""
    return rng.normal(shape)
