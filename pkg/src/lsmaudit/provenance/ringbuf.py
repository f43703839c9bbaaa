"""Bounded FIFO between the capture programs and the serializer."""

from __future__ import annotations

import threading
from collections import deque
from collections.abc import Callable
from typing import Any

from lsmaudit.errors import BufferOverflow


class RingBuffer:
    """Bounded single-producer/single-consumer queue.

    When full, :meth:`push` either drops the element (``drop_on_full``) or
    applies backpressure: it calls ``on_full`` if one was given (synchronous
    pipelines drain here) and otherwise blocks until the consumer frees a
    slot.  A blocked push that times out raises :class:`BufferOverflow`.
    """

    def __init__(
        self,
        capacity: int = 4096,
        drop_on_full: bool = False,
        on_full: Callable[[], Any] | None = None,
    ) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.drop_on_full = drop_on_full
        self.on_full = on_full
        self.pending: deque = deque()
        self.dropped = 0
        self.pushed = 0
        self.high_water = 0
        self._cond = threading.Condition()
        self._waiting = False  # a consumer is blocked in wait_nonempty
        self.closed = False

    def __len__(self) -> int:
        return len(self.pending)

    def full(self) -> bool:
        return len(self.pending) >= self.capacity

    def push(self, element: Any, timeout: float | None = None) -> bool:
        """Enqueue ``element``; False if it was dropped."""
        self.pushed += 1
        pending = self.pending
        if len(pending) < self.capacity:
            # deque.append is atomic; only take the lock to wake a blocked consumer
            pending.append(element)
            if len(pending) > self.high_water:
                self.high_water = len(pending)
            if self._waiting:
                with self._cond:
                    self._cond.notify_all()
            return True
        if self.drop_on_full:
            self.dropped += 1
            return False
        if self.on_full is not None:
            self.on_full()
        if len(pending) >= self.capacity:
            with self._cond:
                ok = self._cond.wait_for(lambda: len(pending) < self.capacity, timeout)
                if not ok:
                    self.pushed -= 1
                    raise BufferOverflow(f"ring buffer full ({self.capacity}) for {timeout}s")
        with self._cond:
            self.pending.append(element)
            if len(self.pending) > self.high_water:
                self.high_water = len(self.pending)
            self._cond.notify_all()
        return True

    def push_many(self, elements: list) -> int:
        """Enqueue ``elements`` in order; returns how many were accepted."""
        pending = self.pending
        n = len(elements)
        if len(pending) + n <= self.capacity:
            self.pushed += n
            pending.extend(elements)
            if len(pending) > self.high_water:
                self.high_water = len(pending)
            if self._waiting:
                with self._cond:
                    self._cond.notify_all()
            return n
        return sum(self.push(el) for el in elements)

    def pop_all(self) -> list:
        with self._cond:
            # pop a counted prefix: the producer may append concurrently
            pending = self.pending
            out = [pending.popleft() for _ in range(len(pending))]
            self._cond.notify_all()
        return out

    def wait_nonempty(self, timeout: float | None = None) -> bool:
        """Block until an element is pending or the buffer is closed."""
        with self._cond:
            self._waiting = True
            try:
                return bool(self._cond.wait_for(lambda: self.pending or self.closed, timeout))
            finally:
                self._waiting = False

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()
