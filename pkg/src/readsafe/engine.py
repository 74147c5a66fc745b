"""In-memory multiversion engine with SI, SSI, safe snapshots and RSS reads.

All sessions go through one engine latch, which gives linearizable
begin/read/write/commit/abort. Protected read-only sessions (``use_rss``)
read a published read-safe snapshot and only touch the operation log, so they
never wait on the latch or on other transactions.

SSI uses the conservative two-flag rule: a transaction may not hold both a
concurrent incoming and a concurrent outgoing rw-antidependency. The
transaction whose operation would create such a pivot is aborted, so an
already committed transaction is never the victim.
"""

from __future__ import annotations

import bisect
import enum
import itertools
import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .history import T0, History, Operation, OpKind, Version, history_from_ops
from .wal.records import AbortRec, BeginRec, CommitRec, RwDeps, WalRecord

log = logging.getLogger(__name__)


class Mode(enum.Enum):
    SI = "SI"
    SSI = "SSI"


class EngineError(Exception):
    pass


class EngineClosed(EngineError):
    pass


class UnknownKey(EngineError, KeyError):
    pass


class ReadOnlyViolation(EngineError):
    pass


class VersionReclaimed(EngineError):
    """A read needed a version the garbage collector already dropped."""


class TransactionAborted(EngineError):
    reason = "aborted"

    def __init__(self, txn: int, detail: str = ""):
        super().__init__(f"T{txn} aborted ({self.reason}){': ' + detail if detail else ''}")
        self.txn = txn


class WriteConflict(TransactionAborted):
    reason = "ww-conflict"


class SerializationFailure(TransactionAborted):
    reason = "serialization"


class SafeSnapshotTimeout(TransactionAborted):
    reason = "safe-snapshot-timeout"


class SessionState(enum.Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass(eq=False)
class Session:
    txn: int
    snapshot_seq: int
    read_only: bool = False
    deferrable: bool = False
    use_rss: bool = False
    engine: "Engine | None" = field(default=None, repr=False)
    state: SessionState = SessionState.ACTIVE
    begin_hseq: int = -1
    end_hseq: int | None = None
    commit_seq: int | None = None
    writes: dict[str, int] = field(default_factory=dict, repr=False)
    read_keys: set[str] = field(default_factory=set, repr=False)
    rw_in: set[int] = field(default_factory=set, repr=False)
    rw_out: set[int] = field(default_factory=set, repr=False)
    # safe-snapshot bookkeeping
    wait_for: set[int] = field(default_factory=set, repr=False)
    safe: bool = False
    waited: float = 0.0
    # earliest commit_seq among rw-out targets already committed when we commit
    min_out_commit: float = math.inf
    snapshot: object = field(default=None, repr=False)

    @property
    def active(self) -> bool:
        return self.state is SessionState.ACTIVE

    @property
    def protected(self) -> bool:
        return self.use_rss or self.deferrable

    @property
    def tracked(self) -> bool:
        """Participates in SSI conflict tracking and in the WAL stream."""
        return not self.protected

    def read(self, key: str):
        return self.engine.read(self, key)

    def write(self, key: str, value: int):
        return self.engine.write(self, key, value)

    def commit(self) -> int:
        return self.engine.commit(self)

    def abort(self) -> None:
        self.engine.abort(self)


class _Chain:
    __slots__ = ("seqs", "creators", "values")

    def __init__(self):
        self.seqs: list[int] = []
        self.creators: list[int] = []
        self.values: list[int] = []

    def append(self, seq: int, creator: int, value: int):
        self.seqs.append(seq)
        self.creators.append(creator)
        self.values.append(value)

    def visible(self, snapshot: int) -> int:
        return bisect.bisect_right(self.seqs, snapshot) - 1

    def __len__(self):
        return len(self.seqs)


@dataclass
class EngineStats:
    commits: int = 0
    aborts: int = 0
    ww_aborts: int = 0
    serialization_aborts: int = 0
    prot_waits: int = 0
    prot_aborts: int = 0
    prot_wait_seconds: float = 0.0
    reclaimed_versions: int = 0


class Engine:
    def __init__(
        self,
        keys: Iterable[str],
        mode: Mode | str = Mode.SSI,
        *,
        deferrable_timeout: float = 10.0,
        gc_every: int = 256,
        audit_reclaim: bool = False,
        record_history: bool = True,
    ):
        self.mode = Mode(mode)
        self.deferrable_timeout = deferrable_timeout
        self.gc_every = gc_every
        self.record_history = record_history
        self.stats = EngineStats()

        self._lock = threading.RLock()
        self._changed = threading.Condition(self._lock)
        self._log_lock = threading.Lock()
        self._closed = False

        self._keys = sorted(set(keys))
        self._chains: dict[str, _Chain] = {}
        self._ops: list[Operation] = []
        self._seq = 0
        for k in self._keys:
            ch = _Chain()
            ch.append(0, T0, 0)
            self._chains[k] = ch
            self._log(T0, OpKind.WRITE, Version(k, T0), 0)
        self._log(T0, OpKind.COMMIT)

        self._commit_seq = 0
        self._commit_seq_of: dict[int, int] = {T0: 0}
        self._next_txn = itertools.count(1)
        self._lsn = 0
        self._sinks: list[Callable[[list[WalRecord]], None]] = []
        self._wal: list[WalRecord] | None = None

        self._active: dict[int, Session] = {}
        # sessions whose conflict tracking is still needed, keyed by txn
        self._tracked: dict[int, Session] = {}
        self._retained: deque[Session] = deque()
        self._readers: dict[str, dict[int, int]] = {k: {} for k in self._keys}
        self._pending: dict[str, int] = {}

        self._rss = None
        self._retention_sources: list[Callable[[], int | None]] = []
        self._since_gc = 0
        self.reclaimed: set[tuple[str, int]] = set()
        self._audit_reclaim = audit_reclaim
        self.safe_snapshots: dict[int, int] = {}

    # -- wiring ---------------------------------------------------------

    @property
    def keys(self) -> list[str]:
        return list(self._keys)

    @property
    def commit_seq(self) -> int:
        return self._commit_seq

    def commit_seq_of(self, txn: int) -> int | None:
        return self._commit_seq_of.get(txn)

    def add_wal_sink(self, sink: Callable[[list[WalRecord]], None]) -> None:
        self._sinks.append(sink)

    def keep_wal(self) -> list[WalRecord]:
        """Start retaining every emitted record in memory and return the list."""
        with self._lock:
            if self._wal is None:
                self._wal = []
            return self._wal

    def attach_rss(self, manager) -> None:
        """Serve ``use_rss`` sessions from ``manager``'s published snapshots."""
        self._rss = manager
        self.add_retention_source(manager.retention_watermark)

    def add_retention_source(self, source: Callable[[], int | None]) -> None:
        self._retention_sources.append(source)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._changed.notify_all()

    # -- logging --------------------------------------------------------

    def _log(self, txn, kind, version=None, value=None, protected=False) -> int:
        with self._log_lock:
            seq = self._seq
            self._seq += 1
            if self.record_history:
                self._ops.append(Operation(seq, txn, kind, version, value, protected))
            return seq

    def _emit(self, payloads) -> None:
        batch = []
        for p in payloads:
            self._lsn += 1
            batch.append(WalRecord(self._lsn, p))
        if self._wal is not None:
            self._wal.extend(batch)
        for sink in self._sinks:
            sink(batch)

    def export_history(self) -> History:
        with self._log_lock:
            ops = list(self._ops)
        return history_from_ops(ops, self._keys)

    # -- transactions ---------------------------------------------------

    def begin(self, *, read_only: bool = False, deferrable: bool = False,
              use_rss: bool = False) -> Session:
        if use_rss:
            return self._begin_protected()
        read_only = read_only or deferrable
        with self._lock:
            if self._closed:
                raise EngineClosed("engine is shut down")
            txn = next(self._next_txn)
            s = Session(txn, self._commit_seq, read_only, deferrable, False, self)
            s.begin_hseq = self._log(txn, OpKind.BEGIN, protected=deferrable)
            if deferrable:
                self._take_safe_candidate(s)
            else:
                self._emit([BeginRec(txn, s.begin_hseq)])
                if self.mode is Mode.SSI:
                    self._tracked[txn] = s
            self._active[txn] = s
            return s

    def _begin_protected(self) -> Session:
        if self._rss is None:
            raise EngineError("no read-safe snapshot manager attached")
        if self._closed:
            raise EngineClosed("engine is shut down")
        snap = self._rss.acquire()
        txn = next(self._next_txn)
        s = Session(txn, snap.basis_commit_seq, True, False, True, self)
        s.snapshot = snap
        s.begin_hseq = self._log(txn, OpKind.BEGIN, protected=True)
        return s

    def read(self, s: Session, key: str) -> tuple[int, Version]:
        if not s.active:
            raise EngineError(f"T{s.txn} is not active")
        if s.use_rss:
            try:
                version, value = s.snapshot.read_map[key]
            except KeyError:
                raise UnknownKey(key) from None
            self._log(s.txn, OpKind.READ, version, value)
            return value, version
        with self._lock:
            if key not in self._chains:
                raise UnknownKey(key)
            if key in s.writes:
                v = Version(key, s.txn)
                self._log(s.txn, OpKind.READ, v, s.writes[key])
                return s.writes[key], v
            if s.deferrable and not s.safe:
                self._await_safe_snapshot(s)
            chain = self._chains[key]
            idx = chain.visible(s.snapshot_seq)
            if idx < 0:
                raise VersionReclaimed(f"{key} at snapshot {s.snapshot_seq}")
            creator, value = chain.creators[idx], chain.values[idx]
            if self.mode is Mode.SSI and s.tracked:
                succ = None
                if idx + 1 < len(chain):
                    succ = chain.creators[idx + 1]
                else:
                    pw = self._pending.get(key)
                    if pw is not None and pw != s.txn:
                        succ = pw
                if succ is not None:
                    self._check_edges(s, [(s.txn, succ)])
                    self._add_edge(s.txn, succ)
                self._readers[key].setdefault(s.txn, creator)
                s.read_keys.add(key)
            v = Version(key, creator)
            self._log(s.txn, OpKind.READ, v, value)
            return value, v

    def write(self, s: Session, key: str, value: int) -> Version:
        if not s.active:
            raise EngineError(f"T{s.txn} is not active")
        if s.read_only:
            raise ReadOnlyViolation(f"T{s.txn} is read-only")
        with self._lock:
            if key not in self._chains:
                raise UnknownKey(key)
            v = Version(key, s.txn)
            if key in s.writes:
                s.writes[key] = value
                self._log(s.txn, OpKind.WRITE, v, value)
                return v
            pw = self._pending.get(key)
            if pw is not None and pw != s.txn:
                self._abort_locked(s, WriteConflict, f"{key} is being written by T{pw}")
            chain = self._chains[key]
            if chain.seqs[-1] > s.snapshot_seq:
                self._abort_locked(s, WriteConflict,
                                   f"{key} was committed by T{chain.creators[-1]} after our snapshot")
            if self.mode is Mode.SSI:
                newest = chain.creators[-1]
                edges = [
                    (r, s.txn)
                    for r, read_from in self._readers[key].items()
                    if r != s.txn and read_from == newest and self._concurrent(r, s)
                ]
                if edges:
                    self._check_edges(s, edges)
                    for a, b in edges:
                        self._add_edge(a, b)
            self._pending[key] = s.txn
            s.writes[key] = value
            self._log(s.txn, OpKind.WRITE, v, value)
            return v

    def commit(self, s: Session) -> int:
        if s.use_rss:
            return self._end_protected(s, commit=True)
        with self._lock:
            if not s.active:
                raise EngineError(f"T{s.txn} is not active")
            if s.deferrable:
                s.state = SessionState.COMMITTED
                s.end_hseq = self._log(s.txn, OpKind.COMMIT)
                self._active.pop(s.txn, None)
                self._after_end()
                return self._commit_seq
            self._commit_seq += 1
            cs = self._commit_seq
            s.commit_seq = cs
            self._commit_seq_of[s.txn] = cs
            for k, val in s.writes.items():
                self._chains[k].append(cs, s.txn, val)
                if self._pending.get(k) == s.txn:
                    del self._pending[k]
            s.state = SessionState.COMMITTED
            s.end_hseq = self._log(s.txn, OpKind.COMMIT)
            self._active.pop(s.txn, None)
            outs = sorted(s.rw_out)
            done = [self._commit_seq_of[t] for t in outs if t in self._commit_seq_of]
            if done:
                s.min_out_commit = min(done)
            payloads = [CommitRec(s.txn, cs, s.end_hseq, tuple(sorted(s.writes.items())), len(outs))]
            if outs:
                payloads.append(RwDeps(s.txn, tuple(outs)))
            self._emit(payloads)
            self.stats.commits += 1
            if s.txn in self._tracked:
                self._retained.append(s)
            self._after_end()
            return cs

    def abort(self, s: Session) -> None:
        if s.use_rss:
            if s.active:
                self._end_protected(s, commit=False)
            return
        with self._lock:
            if s.active:
                self._abort_locked(s, None)

    # -- internals ------------------------------------------------------

    def _end_protected(self, s: Session, commit: bool) -> int:
        if not s.active:
            raise EngineError(f"T{s.txn} is not active")
        s.state = SessionState.COMMITTED if commit else SessionState.ABORTED
        s.end_hseq = self._log(s.txn, OpKind.COMMIT if commit else OpKind.ABORT)
        self._rss.release(s.snapshot)
        return s.snapshot.basis_commit_seq

    def _abort_locked(self, s: Session, exc_type, detail: str = ""):
        s.state = SessionState.ABORTED
        for k in s.writes:
            if self._pending.get(k) == s.txn:
                del self._pending[k]
        for t in s.rw_out:
            other = self._tracked.get(t)
            if other is not None:
                other.rw_in.discard(s.txn)
        for t in s.rw_in:
            other = self._tracked.get(t)
            if other is not None:
                other.rw_out.discard(s.txn)
        for k in s.read_keys:
            self._readers[k].pop(s.txn, None)
        self._tracked.pop(s.txn, None)
        self._active.pop(s.txn, None)
        s.end_hseq = self._log(s.txn, OpKind.ABORT)
        if not s.deferrable:
            self._emit([AbortRec(s.txn, s.end_hseq)])
        self.stats.aborts += 1
        if exc_type is WriteConflict:
            self.stats.ww_aborts += 1
        elif exc_type is SerializationFailure:
            self.stats.serialization_aborts += 1
        elif exc_type is SafeSnapshotTimeout:
            self.stats.prot_aborts += 1
        self._after_end()
        if exc_type is not None:
            raise exc_type(s.txn, detail)

    def _concurrent(self, reader: int, writer: Session) -> bool:
        r = self._tracked.get(reader)
        if r is None:
            return False
        return r.active or r.end_hseq > writer.begin_hseq

    def _check_edges(self, current: Session, edges) -> None:
        for a, b in edges:
            sa, sb = self._tracked.get(a), self._tracked.get(b)
            if sa is None or sb is None or b in sa.rw_out:
                continue
            if sa.rw_in or sb.rw_out:
                pivot = a if sa.rw_in else b
                self._abort_locked(current, SerializationFailure,
                                   f"T{a} -rw-> T{b} would make T{pivot} a pivot")

    def _add_edge(self, a: int, b: int) -> None:
        sa, sb = self._tracked.get(a), self._tracked.get(b)
        if sa is None or sb is None:
            return
        sa.rw_out.add(b)
        sb.rw_in.add(a)

    def _after_end(self) -> None:
        self._release_conflict_tracking()
        self._since_gc += 1
        if self.gc_every and self._since_gc >= self.gc_every:
            self._since_gc = 0
            self.collect_garbage()
        self._changed.notify_all()

    def _release_conflict_tracking(self) -> None:
        # Deferrable sessions are registered serializable transactions and hold
        # back cleanup just like ordinary ones.
        oldest = min((s.begin_hseq for s in self._active.values()), default=math.inf)
        while self._retained and self._retained[0].end_hseq < oldest:
            old = self._retained.popleft()
            for k in old.read_keys:
                self._readers[k].pop(old.txn, None)
            del self._tracked[old.txn]

    # -- safe snapshots -------------------------------------------------

    def _take_safe_candidate(self, s: Session) -> None:
        s.snapshot_seq = self._commit_seq
        s.wait_for = {t for t, o in self._active.items() if not o.protected}

    def _snapshot_is_safe(self, s: Session) -> bool | None:
        """None while concurrent transactions are still running."""
        if any(t in self._active for t in s.wait_for):
            return None
        for t in s.wait_for:
            o = self._tracked.get(t)
            if o is not None and o.state is SessionState.COMMITTED and o.min_out_commit <= s.snapshot_seq:
                return False
        return True

    def _await_safe_snapshot(self, s: Session) -> None:
        deadline = time.monotonic() + self.deferrable_timeout
        started = None
        while True:
            verdict = self._snapshot_is_safe(s)
            if verdict:
                break
            if verdict is False:
                self._take_safe_candidate(s)
                continue
            if started is None:
                started = time.monotonic()
                self.stats.prot_waits += 1
            remaining = deadline - time.monotonic()
            if remaining <= 0 or self._closed:
                s.waited = time.monotonic() - started
                self.stats.prot_wait_seconds += s.waited
                self._abort_locked(s, SafeSnapshotTimeout,
                                   f"no safe snapshot within {self.deferrable_timeout}s")
            self._changed.wait(remaining)
        if started is not None:
            s.waited = time.monotonic() - started
            self.stats.prot_wait_seconds += s.waited
        s.safe = True
        self.safe_snapshots[s.txn] = s.snapshot_seq

    # -- version garbage collection ---------------------------------------

    def gc_horizon(self) -> int:
        horizon = self._commit_seq
        for s in list(self._active.values()):
            horizon = min(horizon, s.snapshot_seq)
        for src in self._retention_sources:
            w = src()
            if w is not None:
                horizon = min(horizon, w)
        return horizon

    def collect_garbage(self) -> int:
        """Drop versions no snapshot at or after the horizon can see."""
        with self._lock:
            horizon = self.gc_horizon()
            dropped = 0
            for key, chain in self._chains.items():
                idx = chain.visible(horizon)
                if idx <= 0:
                    continue
                if self._audit_reclaim:
                    self.reclaimed.update((key, c) for c in chain.creators[:idx])
                del chain.seqs[:idx], chain.creators[:idx], chain.values[:idx]
                dropped += idx
            self.stats.reclaimed_versions += dropped
            return dropped

    def version_chain(self, key: str) -> list[tuple[Version, int, int]]:
        with self._lock:
            ch = self._chains[key]
            return [(Version(key, c), v, s) for c, v, s in zip(ch.creators, ch.values, ch.seqs)]

    def active_sessions(self) -> list[Session]:
        with self._lock:
            return list(self._active.values())
