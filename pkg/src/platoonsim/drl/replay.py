"""Experience replay: a fixed-capacity ring with uniform sampling."""

from __future__ import annotations

import numpy as np


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._next] = item
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        """Uniform sample without replacement; smaller pools return all of
        themselves in random order."""
        n = len(self._items)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        take = min(batch_size, n)
        idx = rng.choice(n, size=take, replace=False)
        return [self._items[i] for i in idx]
