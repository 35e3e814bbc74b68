"""Deterministic discrete-event clock.

All latencies in the package are integer nanoseconds of virtual time.  Events
fire in ``(fire_at, insertion order)`` order, so two runs with the same inputs
replay the exact same interleaving.

Callable payloads are invoked by :meth:`SimClock.step` / :meth:`SimClock.run`;
:meth:`SimClock.advance_to_next` only hands payloads back to the caller.
"""

from __future__ import annotations

import heapq
import itertools
import queue
import time
from typing import Any, Callable


class EmptyQueue(Exception):
    """No pending events."""


class SimClock:
    def __init__(self, mode: str = "virtual", wall_scale: float = 1.0):
        if mode not in ("virtual", "wall"):
            raise ValueError(f"unknown clock mode {mode!r}")
        self.mode = mode
        # wall mode sleeps wall_scale real seconds per simulated second
        self.wall_scale = wall_scale
        self._now = 0
        self._heap: list[tuple[int, int, Any]] = []
        self._seq = itertools.count()
        self._cancelled: set[int] = set()
        self._pending = 0
        self._inbox: queue.SimpleQueue = queue.SimpleQueue()
        self._wall_origin: float | None = None
        self.fired = 0

    def now(self) -> int:
        return self._now

    @property
    def pending(self) -> int:
        self._drain_inbox()
        return self._pending

    def schedule(self, delay: int, payload: Any) -> int:
        """Register ``payload`` at ``now() + delay``; returns the event id."""
        if delay < 0:
            raise ValueError("delay must be >= 0")
        eid = next(self._seq)
        heapq.heappush(self._heap, (self._now + delay, eid, payload))
        self._pending += 1
        return eid

    def call_later(self, delay: int, fn: Callable, *args: Any) -> int:
        if args:
            return self.schedule(delay, lambda: fn(*args))
        return self.schedule(delay, fn)

    def submit(self, delay: int, payload: Any) -> None:
        """Thread-safe enqueue; picked up at the next advance."""
        self._inbox.put((delay, payload))

    def cancel(self, eid: int) -> bool:
        for fire_at, seq, _ in self._heap:
            if seq == eid:
                if eid not in self._cancelled:
                    self._cancelled.add(eid)
                    self._pending -= 1
                    return True
                return False
        return False

    def advance_by(self, delay: int) -> None:
        """Move time forward without firing; refuses to skip pending events."""
        target = self._now + delay
        self._drain_inbox()
        self._purge_cancelled()
        if self._heap and self._heap[0][0] < target:
            raise ValueError("advance_by would skip a pending event")
        self._sleep_until(target)
        self._now = target

    def advance_to_next(self) -> list[Any]:
        """Jump to the earliest pending timestamp and fire every event there."""
        self._drain_inbox()
        self._purge_cancelled()
        if not self._heap:
            raise EmptyQueue()
        fire_at = self._heap[0][0]
        self._sleep_until(fire_at)
        self._now = fire_at
        fired = []
        while self._heap and self._heap[0][0] == fire_at:
            _, eid, payload = heapq.heappop(self._heap)
            if eid in self._cancelled:
                self._cancelled.discard(eid)
                continue
            self._pending -= 1
            fired.append(payload)
        self.fired += len(fired)
        return fired

    def step(self) -> bool:
        """Fire the single next event, invoking it if callable."""
        heap = self._heap
        if not self._inbox.empty():
            self._drain_inbox()
        while heap:
            fire_at, eid, payload = heapq.heappop(heap)
            if self._cancelled and eid in self._cancelled:
                self._cancelled.discard(eid)
                continue
            if self.mode == "wall":
                self._sleep_until(fire_at)
            self._now = fire_at
            self._pending -= 1
            self.fired += 1
            if callable(payload):
                payload()
            return True
        return False

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> int:
        """Fire events until the queue drains, ``until`` is reached or ``stop()``."""
        heap = self._heap
        while True:
            if stop is not None and stop():
                break
            if not self._inbox.empty():
                self._drain_inbox()
            if not heap:
                break
            if until is not None and heap[0][0] > until:
                break
            self.step()
        if until is not None and self._now < until:
            self._sleep_until(until)
            self._now = until
        return self._now

    def run_until(self, target: int) -> int:
        return self.run(until=target)

    def _purge_cancelled(self) -> None:
        heap = self._heap
        while heap and heap[0][1] in self._cancelled:
            self._cancelled.discard(heapq.heappop(heap)[1])

    def _drain_inbox(self) -> None:
        while True:
            try:
                delay, payload = self._inbox.get_nowait()
            except queue.Empty:
                return
            self.schedule(delay, payload)

    def _sleep_until(self, target: int) -> None:
        if self.mode != "wall":
            return
        if self._wall_origin is None:
            self._wall_origin = time.monotonic() - self._now * 1e-9 * self.wall_scale
        lag = self._wall_origin + target * 1e-9 * self.wall_scale - time.monotonic()
        if lag > 0:
            time.sleep(lag)
