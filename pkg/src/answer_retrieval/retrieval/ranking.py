from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class RankedList:
    """(passage id, score) pairs ordered by score descending, then id ascending."""

    items: tuple[tuple[str, float], ...]

    @classmethod
    def from_scores(cls, ids: Sequence[str], scores: Iterable[float], k: int | None = None) -> "RankedList":
        pairs = sorted(zip(ids, (float(s) for s in scores)), key=lambda x: (-x[1], x[0]))
        if len(set(ids)) != len(ids):
            raise ValueError("ranked ids must be unique")
        return cls(tuple(pairs[:k] if k is not None else pairs))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def ids(self) -> list[str]:
        return [pid for pid, _ in self.items]

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.items])

    def top(self, k: int) -> "RankedList":
        return RankedList(self.items[:k])
