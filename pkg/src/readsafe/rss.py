"""Read-safe snapshot construction.

The pure functions (:func:`classify`, :func:`construct_rss`,
:func:`materialize`) work on any transaction-record view of a prefix. The
:class:`RssManager` maintains such a view incrementally from the WAL stream and
publishes snapshots that protected read-only sessions bind to.
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

from .history import T0, TxnRecord, TxnState, Version
from .wal.records import AbortRec, BeginRec, CommitRec, RwDeps, WalRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TxnClasses:
    prefix: int
    done: frozenset[int]
    clear: frozenset[int]
    active: frozenset[int]
    aborted: frozenset[int] = frozenset()

    @property
    def obscure(self) -> frozenset[int]:
        return self.done - self.clear


def classify(records: Mapping[int, TxnRecord], upto: int | None = None) -> TxnClasses:
    """Done/Clear/Active split of the transactions visible in a prefix.

    Aborted transactions never join Done or Clear, but their end still counts
    when deciding which transactions are unfinished.
    """
    if upto is None:
        upto = max((max(r.begin_seq, r.end_seq or -1) for r in records.values()), default=-1)
    done, active, aborted = set(), set(), set()
    ends: dict[int, int] = {}
    for t, r in records.items():
        if r.begin_seq > upto:
            continue
        ended = r.end_seq is not None and r.end_seq <= upto
        if not ended:
            active.add(t)
        elif r.state is TxnState.COMMITTED:
            done.add(t)
            ends[t] = r.end_seq
        else:
            aborted.add(t)
    horizon = min((records[t].begin_seq for t in active), default=math.inf)
    clear = {t for t in done if ends[t] < horizon}
    return TxnClasses(upto, frozenset(done), frozenset(clear), frozenset(active), frozenset(aborted))


@dataclass
class DepGraphShard:
    """Outgoing rw edges as shipped, indexed in both directions."""

    out: dict[int, set[int]] = field(default_factory=lambda: defaultdict(set))
    into: dict[int, set[int]] = field(default_factory=lambda: defaultdict(set))

    def add(self, reader: int, writers: Iterable[int]) -> None:
        for w in writers:
            if w == reader:
                continue
            self.out[reader].add(w)
            self.into[w].add(reader)

    def edges(self) -> list[tuple[int, int]]:
        return sorted((r, w) for r, ws in self.out.items() for w in ws)

    def __contains__(self, edge) -> bool:
        r, w = edge
        return w in self.out.get(r, ())


@dataclass(frozen=True)
class RssSet:
    members: frozenset[int]
    basis_prefix: int
    epoch: int
    clear: frozenset[int] = frozenset()

    def __contains__(self, txn: int) -> bool:
        return txn in self.members


def construct_rss(classes: TxnClasses, deps: DepGraphShard, epoch: int = 1) -> RssSet:
    """Clear(p) plus every finished non-Clear transaction with a direct edge into it."""
    members = set(classes.clear)
    for u in classes.obscure:
        if deps.out.get(u, set()) & classes.clear:
            members.add(u)
    return RssSet(frozenset(members), classes.prefix, epoch, classes.clear)


@dataclass(frozen=True)
class RssSnapshot:
    epoch: int
    read_map: Mapping[str, tuple[Version, int]]
    retention_watermark: int
    rss: RssSet
    basis_commit_seq: int = 0

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.read_map):
            v, val = self.read_map[k]
            h.update(f"{k}={v.creator}:{val};".encode())
        return h.hexdigest()[:16]


_EMPTY: frozenset = frozenset()


class VersionMissing(RuntimeError):
    pass


# chains: key -> list of (creator, value, commit_seq) in commit order
Chains = Mapping[str, list[tuple[int, int, int]]]


def _pick(chain, members) -> tuple[int, int, int] | None:
    for entry in reversed(chain):
        if entry[0] in members:
            return entry
    return None


def materialize(rss: RssSet, chains: Chains, basis_commit_seq: int = 0) -> RssSnapshot:
    """Per key, the version of the latest-committing member; watermark = oldest of those."""
    read_map, seqs = {}, []
    for key, chain in chains.items():
        entry = _pick(chain, rss.members)
        if entry is None:
            raise VersionMissing(f"no retained version of {key} written by the snapshot members")
        read_map[key] = (Version(key, entry[0]), entry[1])
        seqs.append(entry[2])
    return RssSnapshot(rss.epoch, MappingProxyType(read_map), min(seqs, default=0), rss,
                       basis_commit_seq)


def gc_horizon(snapshots: Iterable[RssSnapshot], active_snapshot_seqs: Iterable[int],
               current_commit_seq: int) -> int:
    horizon = current_commit_seq
    for s in snapshots:
        horizon = min(horizon, s.retention_watermark)
    for seq in active_snapshot_seqs:
        horizon = min(horizon, seq)
    return horizon


class RssManager:
    """Builds and publishes read-safe snapshots from a WAL record stream.

    Feed it with :meth:`apply` (or :meth:`enqueue` from a producer thread);
    :meth:`refresh` turns everything applied so far into a new epoch.

    Construction is incremental. Clear only ever grows by a prefix of the
    commit order (everything that ended before the oldest unfinished begin),
    and a finished transaction with an edge into Clear keeps that edge, so the
    member set of successive epochs is monotone and each refresh only looks
    at newly cleared transactions and at the still-obscure ones.
    """

    def __init__(self, keys: Iterable[str], *, keep_history: bool = False):
        self._keys = sorted(set(keys))
        self._lock = threading.Lock()
        self._inbox: list[WalRecord] = []
        self._inbox_lock = threading.Lock()

        self.applied_lsn = 0
        self.prefix = -1
        # txn -> [begin hseq, end hseq or None, state]
        self._life: dict[int, list] = {T0: [-1, -1, TxnState.COMMITTED]}
        self.deps = DepGraphShard()
        self.chains: dict[str, list[tuple[int, int, int]]] = {k: [(T0, 0, 0)] for k in self._keys}
        self.write_keys: dict[int, tuple[str, ...]] = {T0: tuple(self._keys)}
        self.commit_seq = 0
        self.commit_seq_of: dict[int, int] = {T0: 0}
        self._basis_commit_seq = 0
        self._active_begin: dict[int, int] = {}
        self._committed_order: list[tuple[int, int]] = [(-1, T0)]  # (end hseq, txn)
        self._clear_upto = 0  # index into _committed_order
        self._clear: set[int] = set()
        # cleared since the last refresh (classes() may advance Clear too)
        self._fresh_clear: list[int] = []
        self._obscure: set[int] = {T0}
        self._aborted: set[int] = set()
        self._held: list[WalRecord] = []
        self._awaiting_deps: dict[int, int] = {}

        self.epoch = 0
        self._members: set[int] = set()
        self._read_map: dict[str, tuple[Version, int]] = {}
        self._read_seq: dict[str, int] = {}
        self._published: RssSnapshot | None = None
        # pinning is kept off the construction lock so that binding a reader
        # to the published snapshot never waits for a refresh in progress
        self._pin_lock = threading.Lock()
        self._pins: dict[int, int] = defaultdict(int)
        self._pinned: dict[int, RssSnapshot] = {}
        self.history: list[RssSet] = []
        self.keep_history = keep_history
        # called as listener(snapshot, newly_added_members) after each publish
        self.listeners: list = []
        self._timer: threading.Thread | None = None
        self._stop = threading.Event()
        # input bookkeeping for the quiescence trigger
        self._inputs = 0
        self._inputs_built = 0
        self._last_input = 0.0
        self.refresh()

    # -- stream input ---------------------------------------------------

    def enqueue(self, batch: list[WalRecord]) -> None:
        with self._inbox_lock:
            self._inbox.extend(batch)
        self._note_input()

    def _note_input(self) -> None:
        self._inputs += 1
        self._last_input = time.monotonic()

    def drain(self) -> int:
        with self._inbox_lock:
            batch, self._inbox = self._inbox, []
        if batch:
            with self._lock:
                for rec in batch:
                    self._apply_locked(rec)
        return len(batch)

    def apply(self, rec: WalRecord) -> None:
        with self._lock:
            self._apply_locked(rec)
        self._note_input()

    def _apply_locked(self, rec: WalRecord) -> None:
        if rec.lsn <= self.applied_lsn:
            return
        p = rec.payload
        if self._held:
            if any(h.lsn == rec.lsn for h in self._held):
                return
            self._held.append(rec)
            if isinstance(p, CommitRec) and p.rw:
                self._awaiting_deps[p.txn] = rec.lsn
            elif isinstance(p, RwDeps) and p.txn in self._awaiting_deps:
                del self._awaiting_deps[p.txn]
                if not self._awaiting_deps:
                    held, self._held = self._held, []
                    for r in held:
                        self._do_apply(r)
            return
        if isinstance(p, CommitRec) and p.rw:
            # hold everything until the announced dependency record arrives
            self._held.append(rec)
            self._awaiting_deps[p.txn] = rec.lsn
            return
        self._do_apply(rec)

    def _do_apply(self, rec: WalRecord) -> None:
        p = rec.payload
        if rec.lsn > self.applied_lsn:
            self.applied_lsn = rec.lsn
        if isinstance(p, BeginRec):
            self._life[p.txn] = [p.hseq, None, TxnState.ACTIVE]
            self._active_begin[p.txn] = p.hseq
        elif isinstance(p, CommitRec):
            self._active_begin.pop(p.txn, None)
            life = self._life.setdefault(p.txn, [p.hseq, None, None])
            life[1], life[2] = p.hseq, TxnState.COMMITTED
            cs = p.commit_seq
            for k, v in p.writes:
                self.chains[k].append((p.txn, v, cs))
            self.write_keys[p.txn] = tuple(k for k, _ in p.writes)
            self._committed_order.append((p.hseq, p.txn))
            self._obscure.add(p.txn)
            if cs > self.commit_seq:
                self.commit_seq = cs
            self.commit_seq_of[p.txn] = cs
        elif isinstance(p, AbortRec):
            self._active_begin.pop(p.txn, None)
            life = self._life.setdefault(p.txn, [p.hseq, None, None])
            life[1], life[2] = p.hseq, TxnState.ABORTED
            self._aborted.add(p.txn)
        else:
            self.deps.add(p.txn, p.writers)
            return
        if p.hseq > self.prefix:
            self.prefix = p.hseq

    @property
    def records(self) -> dict[int, TxnRecord]:
        """Lifecycle of every transaction applied so far (read/write sets omitted)."""
        with self._lock:
            return {t: TxnRecord(t, b, e, st) for t, (b, e, st) in self._life.items()}

    # -- construction ---------------------------------------------------

    def classes(self) -> TxnClasses:
        with self._lock:
            self._advance_clear()
            clear = frozenset(self._clear)
            return TxnClasses(self.prefix, clear | self._obscure, clear,
                              frozenset(self._active_begin), frozenset(self._aborted))

    def _advance_clear(self) -> None:
        horizon = min(self._active_begin.values(), default=math.inf)
        order = self._committed_order
        i = self._clear_upto
        while i < len(order) and order[i][0] < horizon:
            t = order[i][1]
            self._clear.add(t)
            self._obscure.discard(t)
            self._fresh_clear.append(t)
            i += 1
        self._clear_upto = i

    def refresh(self) -> RssSnapshot:
        """Drain the inbox, construct the next RSS and publish it."""
        self._inputs_built = self._inputs
        self.drain()
        with self._lock:
            self._advance_clear()
            added = {t for t in self._fresh_clear if t not in self._members}
            self._fresh_clear = []
            clear = self._clear
            for u in self._obscure:
                if u not in self._members and not self.deps.out.get(u, _EMPTY).isdisjoint(clear):
                    added.add(u)
            rss = RssSet(frozenset(self._members | added), self.prefix, self.epoch + 1,
                         frozenset(clear))
            snap = self._materialize_incremental(rss, added)
            self.epoch = rss.epoch
            if self.keep_history:
                self.history.append(rss)
            with self._pin_lock:
                self._published = snap
        for cb in self.listeners:
            cb(snap, frozenset(added))
        return snap

    def _materialize_incremental(self, rss: RssSet, added: set[int]) -> RssSnapshot:
        touched = set()
        for t in added:
            touched.update(self.write_keys.get(t, ()))
        if not self._read_map:
            touched = set(self.chains)
        self._members.update(added)
        for k in touched:
            entry = _pick(self.chains[k], self._members)
            if entry is None:
                raise VersionMissing(f"no version of {k} written by the snapshot members")
            self._read_map[k] = (Version(k, entry[0]), entry[1])
            self._read_seq[k] = entry[2]
        for t in added:
            cs = self.commit_seq_of.get(t, 0)
            if cs > self._basis_commit_seq:
                self._basis_commit_seq = cs
        watermark = min(self._read_seq.values(), default=0)
        return RssSnapshot(rss.epoch, MappingProxyType(dict(self._read_map)), watermark, rss,
                           self._basis_commit_seq)

    # -- construction invoker -------------------------------------------

    def start(self, cadence: float = 0.1, quiet: float | None = None) -> None:
        """Rebuild the snapshot every ``cadence`` seconds on a daemon thread.

        With ``quiet`` set, also rebuild as soon as the input stream has been
        silent for ``quiet`` seconds after delivering something new.
        """
        if self._timer is not None:
            return
        self._stop.clear()

        def run():
            due = time.monotonic() + cadence
            while True:
                timeout = due - time.monotonic()
                if quiet is not None:
                    timeout = min(timeout, quiet)
                if self._stop.wait(max(0.0, timeout)):
                    return
                now = time.monotonic()
                settled = (quiet is not None and self._inputs != self._inputs_built
                           and now - self._last_input >= quiet)
                if now >= due or settled:
                    self.refresh()
                    due = now + cadence

        self._timer = threading.Thread(target=run, name="rss-invoker", daemon=True)
        self._timer.start()

    def stop(self) -> None:
        if self._timer is None:
            return
        self._stop.set()
        self._timer.join()
        self._timer = None
        self.refresh()

    # -- publication ----------------------------------------------------

    @property
    def published(self) -> RssSnapshot:
        return self._published

    def acquire(self) -> RssSnapshot:
        with self._pin_lock:
            snap = self._published
            self._pins[snap.epoch] += 1
            self._pinned[snap.epoch] = snap
            return snap

    def release(self, snap: RssSnapshot) -> None:
        with self._pin_lock:
            self._pins[snap.epoch] -= 1
            if self._pins[snap.epoch] <= 0:
                del self._pins[snap.epoch]
                del self._pinned[snap.epoch]

    def live_snapshots(self) -> list[RssSnapshot]:
        with self._pin_lock:
            out = list(self._pinned.values())
            published = self._published
        if published is not None and published.epoch not in {s.epoch for s in out}:
            out.append(published)
        return out

    def retention_watermark(self) -> int | None:
        snaps = self.live_snapshots()
        if not snaps:
            return None
        return min(s.retention_watermark for s in snaps)

    def dump(self) -> dict:
        classes = self.classes()
        snap = self._published
        return {
            "epoch": snap.epoch,
            "basis_prefix": snap.rss.basis_prefix,
            "members": sorted(snap.rss.members),
            "done": len(classes.done),
            "clear": len(classes.clear),
            "active": len(classes.active),
            "read_map_digest": snap.digest(),
        }
