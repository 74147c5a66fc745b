"""Replica state machine fed by the WAL stream.

The replica rebuilds transaction records, the rw-dependency shard and the
version store from shipped records, runs snapshot construction on its own
view and serves wait-free reads from the published snapshot. It reports the
oldest commit sequence it still needs back to the primary.
"""

from __future__ import annotations

import bisect
import itertools
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from ..history import Version
from ..rss import RssManager, RssSnapshot
from .records import CommitRec, FeedbackMsg, WalRecord, load


class ReplicaNotReady(RuntimeError):
    pass


class OutOfOrder(RuntimeError):
    pass


@dataclass(eq=False)
class ReplicaSession:
    """A read-only session on the replica.

    ``kind`` is "prot" (pinned to one published snapshot) or "si" (plain
    snapshot read of everything applied when the session began).
    """

    sid: int
    kind: str
    replica: "Replica" = field(repr=False)
    snapshot: RssSnapshot | None = field(default=None, repr=False)
    snapshot_seq: int = 0
    reads: list[tuple[str, Version, int]] = field(default_factory=list, repr=False)
    open: bool = True

    def read(self, key: str) -> tuple[int, Version]:
        if not self.open:
            raise RuntimeError(f"replica session {self.sid} is closed")
        if self.kind == "prot":
            try:
                version, value = self.snapshot.read_map[key]
            except KeyError:
                raise KeyError(key) from None
        else:
            value, version = self.replica._si_read(key, self.snapshot_seq)
        self.reads.append((key, version, value))
        return value, version

    def close(self) -> None:
        if not self.open:
            return
        self.open = False
        self.replica._end_session(self)


class Replica:
    """Single replica applying an lsn-ordered record stream.

    With ``construct=False`` the replica only serves plain snapshot reads of
    the applied state. With ``construct_on_apply`` every received batch is followed by a
    construction pass; otherwise call :meth:`start` for the timer-driven
    invoker or :meth:`refresh` on demand.
    """

    def __init__(self, keys: Iterable[str], *, construct: bool = True,
                 construct_on_apply: bool = False, keep_history: bool = False,
                 feedback: Callable[[FeedbackMsg], None] | None = None):
        self.manager = RssManager(keys, keep_history=keep_history)
        # a replica that only serves plain snapshot reads never pins epochs
        self.construct = construct
        self.construct_on_apply = construct_on_apply and construct
        self._feedback_cb = feedback
        self._lock = threading.Lock()
        self._sessions_lock = threading.Lock()
        self._pending: dict[int, WalRecord] = {}
        self.applied_lsn = 0
        self.duplicates = 0
        self._last_feedback = 0
        self._ids = itertools.count(1)
        self._si_sessions: dict[int, ReplicaSession] = {}
        self.finished: list[ReplicaSession] = []
        self.keep_sessions = False
        # called with the txn id of every commit record as it is applied
        self.on_commit_applied: Callable[[int], None] | None = None

    # -- stream ---------------------------------------------------------

    def receive(self, batch: Iterable[WalRecord]) -> int:
        """Apply records in lsn order; duplicates are ignored, gaps buffered."""
        applied = 0
        with self._lock:
            for rec in batch:
                if rec.lsn <= self.applied_lsn or rec.lsn in self._pending:
                    self.duplicates += 1
                    continue
                self._pending[rec.lsn] = rec
            while self.applied_lsn + 1 in self._pending:
                rec = self._pending.pop(self.applied_lsn + 1)
                self.manager.apply(rec)
                self.applied_lsn = rec.lsn
                if self.on_commit_applied is not None and isinstance(rec.payload, CommitRec):
                    self.on_commit_applied(rec.payload.txn)
                applied += 1
        if applied and self.construct_on_apply:
            self.refresh()
        elif applied:
            self.send_feedback()
        return applied

    def apply(self, rec: WalRecord) -> None:
        """Strict single-record apply: ``rec`` must be the next lsn."""
        with self._lock:
            if rec.lsn <= self.applied_lsn:
                self.duplicates += 1
                return
            if rec.lsn != self.applied_lsn + 1:
                raise OutOfOrder(f"expected lsn {self.applied_lsn + 1}, got {rec.lsn}")
        self.receive([rec])

    def load(self, path: str | Path) -> int:
        return self.receive(list(load(path)))

    def refresh(self) -> RssSnapshot:
        snap = self.manager.refresh()
        self.send_feedback()
        return snap

    def start(self, cadence: float = 0.1, quiet: float | None = None) -> None:
        self.manager.start(cadence, quiet)

    def stop(self) -> None:
        self.manager.stop()

    # -- reads ----------------------------------------------------------

    @property
    def published(self) -> RssSnapshot:
        snap = self.manager.published
        if snap is None:
            raise ReplicaNotReady("no snapshot published yet")
        return snap

    def replica_read(self, key: str) -> tuple[int, Version, int]:
        snap = self.published
        version, value = snap.read_map[key]
        return value, version, snap.epoch

    def begin_prot(self) -> ReplicaSession:
        self.published  # raises while warming up
        snap = self.manager.acquire()
        return ReplicaSession(next(self._ids), "prot", self, snapshot=snap,
                              snapshot_seq=snap.basis_commit_seq)

    def begin_si(self) -> ReplicaSession:
        with self._sessions_lock:
            s = ReplicaSession(next(self._ids), "si", self, snapshot_seq=self.manager.commit_seq)
            self._si_sessions[s.sid] = s
            return s

    def _si_read(self, key: str, snapshot_seq: int) -> tuple[int, Version]:
        chain = self.manager.chains[key]
        # chains only grow at the tail, so a bisect over the current length is stable
        i = bisect.bisect_right(chain, snapshot_seq, key=lambda e: e[2]) - 1
        creator, value, _ = chain[i]
        return value, Version(key, creator)

    def _end_session(self, s: ReplicaSession) -> None:
        if s.kind == "prot":
            self.manager.release(s.snapshot)
        else:
            with self._sessions_lock:
                self._si_sessions.pop(s.sid, None)
        if self.keep_sessions:
            with self._sessions_lock:
                self.finished.append(s)
        self.send_feedback()

    # -- feedback -------------------------------------------------------

    def watermark(self) -> int:
        w = self.manager.retention_watermark() if self.construct else None
        w = self.manager.commit_seq if w is None else w
        with self._sessions_lock:
            for s in self._si_sessions.values():
                w = min(w, s.snapshot_seq)
        return w

    def send_feedback(self) -> FeedbackMsg:
        w = max(self._last_feedback, self.watermark())
        self._last_feedback = w
        msg = FeedbackMsg(w)
        if self._feedback_cb is not None:
            self._feedback_cb(msg)
        return msg

    @property
    def last_feedback(self) -> int:
        return self._last_feedback
