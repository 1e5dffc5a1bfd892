"""Class-conditioned history of generated images for discriminator updates."""

from __future__ import annotations

import random
from typing import Any, Hashable, Sequence


class ConditionalImagePool:
    """Per-class image history.

    Each class has its own bucket of at most ``capacity_per_class`` past
    generated patches. A query for class c only ever reads or replaces
    entries in bucket c, so the discriminator sees fakes whose condition
    matches the one it is given.
    """

    def __init__(self, capacity_per_class: int = 50, seed: int = 0):
        if capacity_per_class < 0:
            raise ValueError("capacity_per_class must be >= 0")
        self.capacity_per_class = capacity_per_class
        self.seed = seed
        self.rng = random.Random(seed)
        self.buckets: dict[Hashable, list[Any]] = {}

    def __len__(self):
        return sum(len(b) for b in self.buckets.values())

    def bucket_size(self, cls: Hashable) -> int:
        return len(self.buckets.get(cls, ()))

    def query(self, fresh: Sequence[tuple[Any, Hashable]]) -> list[Any]:
        """Return one patch per (patch, class) item, in input order.

        Under capacity the fresh patch is stored and returned. At capacity,
        with probability 0.5 a random stored patch of the same class is
        returned and replaced by the fresh one; otherwise the fresh patch
        is returned and the bucket is left alone.
        """
        if not fresh:
            raise ValueError("query needs at least one item")
        if self.capacity_per_class == 0:
            return [patch for patch, _ in fresh]
        out = []
        for patch, cls in fresh:
            bucket = self.buckets.setdefault(cls, [])
            if len(bucket) < self.capacity_per_class:
                bucket.append(patch)
                out.append(patch)
            elif self.rng.random() < 0.5:
                slot = self.rng.randrange(self.capacity_per_class)
                out.append(bucket[slot])
                bucket[slot] = patch
            else:
                out.append(patch)
        return out

    def state_dict(self) -> dict:
        return {
            "capacity_per_class": self.capacity_per_class,
            "seed": self.seed,
            "rng": self.rng.getstate(),
            "buckets": {cls: list(items) for cls, items in self.buckets.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.capacity_per_class = state["capacity_per_class"]
        self.seed = state["seed"]
        self.rng.setstate(state["rng"])
        self.buckets = {cls: list(items) for cls, items in state["buckets"].items()}
