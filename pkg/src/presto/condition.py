"""Per-sample conditioning: a category id (text stand-in) and a tempo bucket."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NULL_CATEGORY = -1


@dataclass(frozen=True)
class Condition:
    category: np.ndarray
    tempo: np.ndarray

    @classmethod
    def make(cls, category, tempo=None) -> "Condition":
        category = np.atleast_1d(np.asarray(category, dtype=np.int64))
        if tempo is None:
            tempo = np.zeros_like(category)
        tempo = np.broadcast_to(np.asarray(tempo, dtype=np.int64), category.shape).copy()
        return cls(category, tempo)

    def __len__(self):
        return len(self.category)

    def null(self) -> "Condition":
        """Same tempo, category replaced by the null token."""
        return Condition(np.full_like(self.category, NULL_CATEGORY), self.tempo)

    def is_null(self) -> np.ndarray:
        return self.category == NULL_CATEGORY

    def take(self, idx) -> "Condition":
        return Condition(self.category[idx], self.tempo[idx])

    def repeat(self, n: int) -> "Condition":
        if len(self) == 1:
            return Condition(np.repeat(self.category, n), np.repeat(self.tempo, n))
        if len(self) != n:
            raise ValueError(f"condition of length {len(self)} cannot cover batch {n}")
        return self

    @staticmethod
    def concat(conds) -> "Condition":
        return Condition(np.concatenate([c.category for c in conds]),
                         np.concatenate([c.tempo for c in conds]))
