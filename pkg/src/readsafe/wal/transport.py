"""In-process log shipping with injectable latency, disconnects and duplicates."""

from __future__ import annotations

import random
import threading
import time
from typing import Callable

from .records import WalRecord

Latency = Callable[[], float]


def fixed(seconds: float) -> Latency:
    return lambda: seconds


def uniform(lo: float, hi: float, rng: random.Random | None = None) -> Latency:
    rng = rng or random.Random()
    return lambda: rng.uniform(lo, hi)


class Shipper:
    """Primary-side log plus one delivery cursor towards a replica.

    The primary appends every batch (non-blocking); delivery happens on
    :meth:`pump`, either called directly or from the background thread started
    by :meth:`start`. Delivery is in lsn order and at least once: after a
    disconnect the cursor rewinds to the replica's applied lsn.
    """

    def __init__(self, replica, latency: Latency | float = 0.0, *,
                 duplicate_rate: float = 0.0, rng: random.Random | None = None):
        self.replica = replica
        self.latency = fixed(latency) if isinstance(latency, (int, float)) else latency
        self.duplicate_rate = duplicate_rate
        self._rng = rng or random.Random(0)
        self._log: list[tuple[float, WalRecord]] = []
        self._lock = threading.Lock()
        self._cursor = 0  # index into _log of the next record to deliver
        self._last_due = 0.0
        self.connected = True
        self.delivered = 0
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._wake = threading.Event()

    # primary side
    def send(self, batch: list[WalRecord]) -> None:
        now = time.monotonic()
        with self._lock:
            due = max(self._last_due, now + self.latency())
            self._last_due = due
            self._log.extend((due, rec) for rec in batch)
        self._wake.set()

    @property
    def log(self) -> list[WalRecord]:
        with self._lock:
            return [rec for _, rec in self._log]

    def disconnect(self) -> None:
        with self._lock:
            self.connected = False

    def reconnect(self) -> None:
        with self._lock:
            applied = self.replica.applied_lsn
            # resume right after what the replica has durably applied
            self._cursor = next((i for i, (_, r) in enumerate(self._log) if r.lsn > applied),
                                len(self._log))
            self.connected = True
        self._wake.set()

    def pump(self, now: float | None = None, limit: int | None = None) -> int:
        """Deliver every record that is due; returns the number delivered."""
        now = time.monotonic() if now is None else now
        with self._lock:
            if not self.connected:
                return 0
            start = self._cursor
            end = start
            while end < len(self._log) and self._log[end][0] <= now:
                end += 1
                if limit is not None and end - start >= limit:
                    break
            batch = [rec for _, rec in self._log[start:end]]
            self._cursor = end
        if not batch:
            return 0
        self.replica.receive(batch)
        if self.duplicate_rate and self._rng.random() < self.duplicate_rate:
            self.replica.receive(batch)
        self.delivered += len(batch)
        return len(batch)

    def pending(self) -> int:
        with self._lock:
            return len(self._log) - self._cursor

    def next_due(self) -> float | None:
        with self._lock:
            if self._cursor < len(self._log):
                return self._log[self._cursor][0]
            return None

    def drain(self, timeout: float = 5.0) -> None:
        """Block until every logged record has been delivered."""
        deadline = time.monotonic() + timeout
        while self.pending():
            if time.monotonic() > deadline:
                raise TimeoutError("shipper did not drain")
            if self._thread is None:
                due = self.next_due()
                if due is not None and due > time.monotonic():
                    time.sleep(due - time.monotonic())
                self.pump()
            else:
                time.sleep(0.001)

    def start(self, poll: float = 0.001) -> None:
        if self._thread is not None:
            return
        self._stop.clear()

        def run():
            while not self._stop.is_set():
                if not self.pump():
                    due = self.next_due()
                    wait = poll if due is None else max(0.0, min(poll * 10, due - time.monotonic()))
                    self._wake.wait(wait)
                    self._wake.clear()

        self._thread = threading.Thread(target=run, name="wal-shipper", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._wake.set()
        self._thread.join()
        self._thread = None
