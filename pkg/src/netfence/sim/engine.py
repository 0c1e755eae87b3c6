"""Deterministic discrete-event loop."""

from __future__ import annotations

import hashlib
import heapq
import random
from typing import Any, Callable


class CausalityError(RuntimeError):
    """An event was scheduled in the past."""


class Simulator:
    """Min-heap of ``(time, seq, callback, arg)``; ties run in insertion order."""

    __slots__ = ("now", "_queue", "_seq", "executed")

    def __init__(self, start: float = 0.0):
        self.now = start
        self._queue: list = []
        self._seq = 0
        self.executed = 0

    def at(self, t: float, fn: Callable[[Any], None], arg: Any = None) -> None:
        if t < self.now:
            raise CausalityError(f"event at {t} scheduled from {self.now}")
        self._seq += 1
        heapq.heappush(self._queue, (t, self._seq, fn, arg))

    def after(self, delay: float, fn: Callable[[Any], None], arg: Any = None) -> None:
        self.at(self.now + delay, fn, arg)

    def run(self, until: float) -> None:
        queue = self._queue
        pop = heapq.heappop
        n = 0
        while queue and queue[0][0] <= until:
            t, _, fn, arg = pop(queue)
            self.now = t
            fn(arg)
            n += 1
        self.executed += n
        self.now = until

    def pending(self) -> int:
        return len(self._queue)


def derive_rng(seed: int, *names) -> random.Random:
    """Independent, reproducible stream for one named component."""
    label = ":".join(str(n) for n in (seed,) + names).encode()
    return random.Random(int.from_bytes(hashlib.sha256(label).digest()[:8], "big"))
