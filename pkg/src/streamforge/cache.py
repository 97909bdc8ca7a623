"""Clean-latent context cache: persistent sink blocks plus a rolling FIFO."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class CacheOrderError(RuntimeError):
    """Blocks must be inserted in strictly increasing block order."""


@dataclass(frozen=True, eq=False)
class KVEntry:
    """Final clean prediction of a finished block, shape ``(..., b, d)``."""

    block_index: int
    feature: np.ndarray


class AHISCache:
    """Anchor-heavy identity sinks.

    The first ``sink_capacity`` inserted blocks are kept forever; later blocks
    go through a FIFO of ``rolling_capacity`` entries. ``rolling_capacity=None``
    means unbounded, which with zero sinks is plain full-history context.
    """

    def __init__(self, sink_capacity: int = 3, rolling_capacity: int | None = 2):
        if sink_capacity < 0 or (rolling_capacity is not None and rolling_capacity < 0):
            raise ValueError("cache capacities must be non-negative")
        self.sink_capacity = int(sink_capacity)
        self.rolling_capacity = rolling_capacity
        self.sinks: list[KVEntry] = []
        self.rolling: deque[KVEntry] = deque()
        self._last_index: int | None = None

    @classmethod
    def unbounded(cls) -> "AHISCache":
        return cls(0, None)

    @classmethod
    def sliding(cls, window: int) -> "AHISCache":
        return cls(0, window)

    @property
    def capacity(self) -> float:
        if self.rolling_capacity is None:
            return float("inf")
        return self.sink_capacity + self.rolling_capacity

    @property
    def label(self) -> str:
        if self.rolling_capacity is None:
            return "unbounded" if self.sink_capacity == 0 else f"ahis({self.sink_capacity},inf)"
        return f"ahis({self.sink_capacity},{self.rolling_capacity})"

    def __len__(self) -> int:
        return len(self.sinks) + len(self.rolling)

    def fresh(self) -> "AHISCache":
        return type(self)(self.sink_capacity, self.rolling_capacity)

    def insert(self, entry: KVEntry) -> None:
        if self._last_index is not None and entry.block_index <= self._last_index:
            raise CacheOrderError(
                f"block {entry.block_index} inserted after block {self._last_index}"
            )
        self._last_index = entry.block_index
        if len(self.sinks) < self.sink_capacity:
            self.sinks.append(entry)
            return
        if self.rolling_capacity == 0:
            return
        self.rolling.append(entry)
        if self.rolling_capacity is not None and len(self.rolling) > self.rolling_capacity:
            self.rolling.popleft()

    def context(self) -> list[KVEntry]:
        """Sinks in insertion order, then rolling entries oldest to newest."""
        return list(self.sinks) + list(self.rolling)


def cache_insert(cache: AHISCache, entry: KVEntry) -> None:
    cache.insert(entry)


def cache_context(cache: AHISCache) -> list[KVEntry]:
    return cache.context()
