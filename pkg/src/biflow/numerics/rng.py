"""Seeded, splittable random streams."""

from __future__ import annotations

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor


class Rng:
    """Counter-based generator (Philox) keyed by a 64-bit seed.

    ``split`` derives an independent child stream without disturbing the
    parent's sequence of draws, so adding a consumer in one place does not
    shift the numbers seen elsewhere.
    """

    def __init__(self, seed: int = 0, _key=None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._seq = _key if _key is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))
        self._children = 0

    def split(self) -> Rng:
        child = self._seq.spawn(1)[0]
        self._children += 1
        return Rng(self.seed, _key=child)

    def normal(self, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.standard_normal(size=tuple(shape), dtype=dtype)

    def uniform(self, low=0.0, high=1.0, shape=(), dtype=DEFAULT_DTYPE) -> np.ndarray:
        u = self._gen.random(size=tuple(shape), dtype=np.float64)
        return (low + (high - low) * u).astype(dtype)

    def integers(self, low, high, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state["bit_generator"]


def gaussian(rng: Rng, shape, dtype=DEFAULT_DTYPE) -> Tensor:
    """i.i.d. standard normal draws as a tensor."""
    return Tensor(rng.normal(shape, dtype=dtype))
