"""FIFO replay buffers with uniform sampling (with replacement).

:class:`RingBuffer` stores arbitrary Python objects.  :class:`ArrayBuffer`
has the same eviction and sampling semantics but keeps fixed-shape fields
in preallocated numpy columns so a batch of 1024 is a single fancy-index.
"""
from __future__ import annotations

from typing import Any, Mapping

import numpy as np

from hero.errors import EmptyBufferError

DEFAULT_CAPACITY = 100_000


class RingBuffer:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._items: list[Any] = []
        self._write = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._write] = item
        self._write = (self._write + 1) % self.capacity

    def _indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise EmptyBufferError("cannot sample from an empty buffer")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return rng.integers(0, len(self), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        return [self._items[i] for i in self._indices(batch_size, rng)]

    def contents(self) -> list:
        """Items oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._write:] + self._items[:self._write]

    def clear(self) -> None:
        self._items = []
        self._write = 0


class ArrayBuffer:
    """Columnar ring buffer.

    ``fields`` maps a column name to ``(shape, dtype)`` of one record.
    Storage grows by doubling up to ``capacity``.
    """

    def __init__(self, fields: Mapping[str, tuple[tuple[int, ...], Any]],
                 capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.fields = {k: (tuple(shape), np.dtype(dt)) for k, (shape, dt) in fields.items()}
        self._alloc = min(self.capacity, 1024)
        self._cols = {k: np.zeros((self._alloc,) + shape, dtype=dt)
                      for k, (shape, dt) in self.fields.items()}
        self._size = 0
        self._write = 0

    def __len__(self) -> int:
        return self._size

    def _grow(self):
        new_alloc = min(self.capacity, 2 * self._alloc)
        for k, col in self._cols.items():
            bigger = np.zeros((new_alloc,) + col.shape[1:], dtype=col.dtype)
            bigger[:self._alloc] = col
            self._cols[k] = bigger
        self._alloc = new_alloc

    def push(self, record: Mapping[str, Any]) -> None:
        if self._write >= self._alloc and self._alloc < self.capacity:
            self._grow()
        for k, col in self._cols.items():
            col[self._write] = record[k]
        self._write = (self._write + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self._size == 0:
            raise EmptyBufferError("cannot sample from an empty buffer")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        idx = rng.integers(0, self._size, size=batch_size)
        return {k: col[idx] for k, col in self._cols.items()}

    def contents(self) -> dict[str, np.ndarray]:
        """All records, oldest first."""
        if self._size < self.capacity:
            order = np.arange(self._size)
        else:
            order = (np.arange(self.capacity) + self._write) % self.capacity
        return {k: col[order] for k, col in self._cols.items()}

    def clear(self) -> None:
        self._size = 0
        self._write = 0
