"""Virtual-time event queue: single-threaded, deterministic, no wall clock."""

from __future__ import annotations

import heapq


class Scheduler:
    def __init__(self):
        self._heap: list[tuple[float, int, object]] = []
        self._seq = 0  # FIFO tie-break for simultaneous events
        self.now = 0.0  # seconds

    def at(self, t: float, fn) -> None:
        heapq.heappush(self._heap, (max(t, self.now), self._seq, fn))
        self._seq += 1

    def after(self, dt: float, fn) -> None:
        self.at(self.now + dt, fn)

    def run(self, until: float | None = None) -> int:
        """Drain events in time order, optionally stopping at a time bound."""
        executed = 0
        while self._heap:
            t, _, fn = self._heap[0]
            if until is not None and t > until:
                break
            heapq.heappop(self._heap)
            self.now = t
            fn()
            executed += 1
        if until is not None and until > self.now:
            self.now = until
        return executed

    def pending(self) -> int:
        return len(self._heap)
