"""Fixed-capacity experience replay with uniform minibatch sampling.

A ring buffer: pushes are O(1), the oldest transition is evicted first once
capacity is reached, and sampling is uniform with replacement from whatever
is currently stored (seeded generator for determinism).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .features import State
from .qnet import AdAction


@dataclass
class Transition:
    state: State
    action: AdAction
    reward: float                # combined reward r_ad + alpha * r_ex
    r_ad: float
    r_ex: float
    next_state: State
    next_candidates: np.ndarray  # (K, item_dim); unused when terminal
    terminal: bool


class ReplayBuffer:
    def __init__(self, capacity: int = 10_000):
        if capacity <= 0:
            raise PreconditionError("capacity must be positive")
        self.capacity = capacity
        self._storage: list = [None] * capacity
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, transition: Transition) -> None:
        self._storage[self._cursor] = transition
        self._cursor = (self._cursor + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        if self._size < batch_size:
            raise PreconditionError(
                f"buffer holds {self._size} transitions, cannot sample {batch_size}"
            )
        idx = rng.integers(0, self._size, size=batch_size)
        if self._size < self.capacity:
            return [self._storage[i] for i in idx]
        # Full ring: map logical age order onto physical slots so index 0 is
        # always the oldest stored transition.
        return [self._storage[(self._cursor + i) % self.capacity] for i in idx]

    def oldest_first(self) -> list:
        if self._size < self.capacity:
            return [t for t in self._storage[: self._size]]
        return [self._storage[(self._cursor + i) % self.capacity] for i in range(self.capacity)]
