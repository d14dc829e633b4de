"""Seeded, counter-based random streams."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SeededStream:
    """A Philox stream keyed by an integer seed (plus optional sub-keys).

    Identical keys give identical draw sequences. ``child(*keys)`` derives an
    independent stream without advancing this one.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "SeededStream":
        return SeededStream(self.seed, *self.keys, *keys)

    @property
    def counter(self) -> int:
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size=None, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict):
        self._gen.bit_generator.state = state


def gaussian_draw(stream: SeededStream, shape) -> Tensor:
    return Tensor(stream.normal(shape))
