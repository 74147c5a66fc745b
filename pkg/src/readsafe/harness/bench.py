"""CH-benchmark-lite mixed workload.

OLTP clients run short transactions inside one warehouse-like partition: a
few lookup reads followed by read-modify-write of ``write_txn_size`` keys.
OLAP clients run long read-only scans across partitions. The same seed gives
every client the same sequence of templates in every mode, so paired runs
differ only in how read-only transactions are served.
"""

from __future__ import annotations

import csv
import gc
import io
import logging
import random
import statistics
import sys
import threading
import time
from dataclasses import asdict, dataclass, field, replace

from ..dsg import classify_anomaly
from ..engine import Engine, Mode, TransactionAborted
from ..history import History, Operation, OpKind, committed_projection, history_from_ops
from ..rss import RssManager
from ..wal.records import CommitRec
from ..wal.replica import Replica
from ..wal.transport import Shipper

log = logging.getLogger(__name__)

SINGLE_MODES = ("SSI", "SSI_SAFESNAP", "SSI_RSS", "SI")
REPLICATED_MODES = ("SSI_SI", "SSI_RSS")
CSV_FIELDS = ["mode", "oltpClients", "olapClients", "seed", "oltpTps", "olapQph", "abortRate",
              "protWaits", "protAborts", "freshnessMs", "verdict"]


@dataclass(frozen=True)
class WorkloadSpec:
    mode: str = "SSI"
    replicated: bool = False
    oltp_clients: int = 8
    olap_clients: int = 4
    duration: float = 10.0
    warmup: float = 1.0
    key_count: int = 1000
    partitions: int = 10
    write_txn_size: int = 4
    lookup_size: int = 2
    scan_size: int = 200
    # probability that an OLTP transaction writes in its client's home partition
    home_affinity: float = 0.9
    seed: int = 1
    latency_ms: float = 0.0
    cadence_ms: float = 100.0
    # simulated per-operation client/server latency; releases the interpreter
    # lock so that clients overlap instead of competing for one core
    op_delay_ms: float = 0.5
    olap_pause_every: int = 4
    retry_cap: int = 10
    # pause the cyclic garbage collector while clients run (same in every mode)
    pause_gc: bool = True
    # interpreter thread switch interval while clients run; short values let a
    # thread waking from its simulated latency preempt background work sooner
    switch_interval_ms: float = 0.5
    audit_threshold: int = 2_000_000
    deferrable_timeout: float = 10.0

    def validate(self) -> None:
        modes = REPLICATED_MODES if self.replicated else SINGLE_MODES
        if self.mode not in modes:
            kind = "replicated" if self.replicated else "single-node"
            raise ValueError(f"mode {self.mode!r} is not a {kind} mode (choose from {', '.join(modes)})")
        if self.key_count % self.partitions:
            raise ValueError("key_count must be a multiple of partitions")
        if self.write_txn_size > self.key_count // self.partitions:
            raise ValueError("partition too small for one OLTP transaction")
        if self.write_txn_size + self.lookup_size > self.key_count:
            raise ValueError("too few keys for one OLTP transaction")
        if self.olap_pause_every < 1:
            raise ValueError("olap_pause_every must be at least 1")
        if self.scan_size > self.key_count:
            raise ValueError("scan_size exceeds key_count")
        if self.duration <= 0 or self.warmup < 0:
            raise ValueError("duration must be positive and warmup non-negative")

    @property
    def label(self) -> str:
        return f"{self.mode}{'/replicated' if self.replicated else ''}"


@dataclass
class RunReport:
    spec: WorkloadSpec
    oltp_tps: float = 0.0
    olap_qph: float = 0.0
    abort_rate: float = 0.0
    oltp_commits: int = 0
    olap_commits: int = 0
    attempts: int = 0
    aborts: int = 0
    oltp_aborts: int = 0
    gave_up: int = 0
    prot_waits: int = 0
    prot_aborts: int = 0
    prot_wait_ms: float = 0.0
    freshness_ms: float = 0.0
    freshness_max_ms: float = 0.0
    verdict: str = "skipped"
    audit_ops: int = 0
    cycle: list | None = None
    read_only: int | None = None
    violations: list[str] = field(default_factory=list)

    def csv_row(self) -> dict:
        s = self.spec
        return {
            "mode": s.label, "oltpClients": s.oltp_clients, "olapClients": s.olap_clients,
            "seed": s.seed, "oltpTps": round(self.oltp_tps, 2), "olapQph": round(self.olap_qph, 1),
            "abortRate": round(self.abort_rate, 5), "protWaits": self.prot_waits,
            "protAborts": self.prot_aborts, "freshnessMs": round(self.freshness_ms, 2),
            "verdict": self.verdict,
        }

    def to_json(self) -> dict:
        d = asdict(self)
        d["spec"] = asdict(self.spec)
        d["prota"] = {"waits": self.prot_waits, "aborts": self.prot_aborts}
        return d


def csv_text(reports, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    if header:
        w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


@dataclass
class _Counters:
    commits: int = 0
    attempts: int = 0
    aborts: int = 0
    gave_up: int = 0
    waits: int = 0


class _Workload:
    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        width = len(str(spec.key_count - 1))
        self.keys = [f"k{i:0{width}d}" for i in range(spec.key_count)]
        per = spec.key_count // spec.partitions
        self.partitions = [self.keys[i * per:(i + 1) * per] for i in range(spec.partitions)]

    def client_rng(self, role: str, idx: int) -> random.Random:
        return random.Random(f"{self.spec.seed}:{role}:{idx}")

    def oltp_template(self, rng: random.Random, home: int) -> tuple[list[str], list[str]]:
        """Lookup keys anywhere, then keys to update in one partition."""
        n = len(self.partitions)
        part = home % n if rng.random() < self.spec.home_affinity else rng.randrange(n)
        writes = rng.sample(self.partitions[part], self.spec.write_txn_size)
        lookups = []
        while len(lookups) < self.spec.lookup_size:
            k = rng.choice(self.keys)
            if k not in writes and k not in lookups:
                lookups.append(k)
        return lookups, writes

    def olap_template(self, rng: random.Random) -> list[str]:
        start = rng.randrange(self.spec.key_count)
        n = self.spec.scan_size
        return [self.keys[(start + i) % self.spec.key_count] for i in range(n)]


class _Run:
    """One benchmark execution: wiring, clients, measurement, audit."""

    def __init__(self, spec: WorkloadSpec):
        spec.validate()
        self.spec = spec
        self.work = _Workload(spec)
        self.delay = spec.op_delay_ms / 1000.0
        self.commit_time: dict[int, float] = {}
        self.lags: list[float] = []
        self.replica: Replica | None = None
        self.shipper: Shipper | None = None
        self.manager: RssManager | None = None
        self._feedback = 0
        mode = Mode.SI if spec.mode == "SI" else Mode.SSI
        self.engine = Engine(self.work.keys, mode, deferrable_timeout=spec.deferrable_timeout)
        self.engine.add_wal_sink(self._stamp)
        cadence = spec.cadence_ms / 1000.0
        if spec.replicated:
            rss = spec.mode == "SSI_RSS"
            self.replica = Replica(self.work.keys, construct=rss, feedback=self._on_feedback)
            self.replica.keep_sessions = True
            self.shipper = Shipper(self.replica, spec.latency_ms / 1000.0)
            self.engine.add_wal_sink(self.shipper.send)
            self.engine.add_retention_source(lambda: self._feedback)
            if rss:
                self.replica.manager.listeners.append(self._on_publish)
            else:
                self.replica.on_commit_applied = self._on_applied
        elif spec.mode == "SSI_RSS":
            self.manager = RssManager(self.work.keys)
            self.engine.add_wal_sink(self.manager.enqueue)
            self.engine.attach_rss(self.manager)
            self.manager.listeners.append(self._on_publish)
        self.cadence = cadence
        self.window = (0.0, 0.0)

    # -- hooks ----------------------------------------------------------

    def _stamp(self, batch) -> None:
        now = time.monotonic()
        for rec in batch:
            if isinstance(rec.payload, CommitRec):
                self.commit_time[rec.payload.txn] = now

    def _on_feedback(self, msg) -> None:
        self._feedback = msg.watermark

    def _record_lag(self, txn: int, now: float) -> None:
        t = self.commit_time.get(txn)
        if t is not None and self.window[0] <= t <= self.window[1]:
            self.lags.append(now - t)

    def _on_publish(self, snap, added) -> None:
        now = time.monotonic()
        for t in added:
            self._record_lag(t, now)

    def _on_applied(self, txn: int) -> None:
        self._record_lag(txn, time.monotonic())

    # -- clients --------------------------------------------------------

    def _in_window(self, t: float) -> bool:
        return self.window[0] <= t <= self.window[1]

    def _pause(self) -> None:
        if self.delay:
            time.sleep(self.delay)

    def _oltp(self, idx: int, stop: threading.Event, c: _Counters) -> None:
        rng = self.work.client_rng("oltp", idx)
        eng = self.engine
        while not stop.is_set():
            lookups, writes = self.work.oltp_template(rng, idx)
            for attempt in range(self.spec.retry_cap + 1):
                started = time.monotonic()
                s = eng.begin()
                try:
                    for k in lookups:
                        s.read(k)
                        self._pause()
                    for k in writes:
                        v, _ = s.read(k)
                        s.write(k, v + 1)
                        self._pause()
                    s.commit()
                except TransactionAborted:
                    if self._in_window(started):
                        c.attempts += 1
                        c.aborts += 1
                    continue
                if self._in_window(started):
                    c.attempts += 1
                if self._in_window(time.monotonic()):
                    c.commits += 1
                break
            else:
                c.gave_up += 1

    def _olap_session(self):
        mode, eng = self.spec.mode, self.engine
        if self.replica is not None:
            return self.replica.begin_prot() if mode == "SSI_RSS" else self.replica.begin_si()
        if mode == "SSI_RSS":
            return eng.begin(use_rss=True)
        if mode == "SSI_SAFESNAP":
            return eng.begin(deferrable=True)
        return eng.begin(read_only=True)

    def _olap(self, idx: int, stop: threading.Event, c: _Counters) -> None:
        rng = self.work.client_rng("olap", idx)
        while not stop.is_set():
            scan = self.work.olap_template(rng)
            for attempt in range(self.spec.retry_cap + 1):
                started = time.monotonic()
                s = self._olap_session()
                try:
                    total = 0
                    for i, k in enumerate(scan):
                        v, _ = s.read(k)
                        total += v
                        if i % self.spec.olap_pause_every == self.spec.olap_pause_every - 1:
                            self._pause()
                    if hasattr(s, "commit"):
                        s.commit()
                    else:
                        s.close()
                except TransactionAborted:
                    if self._in_window(started):
                        c.attempts += 1
                        c.aborts += 1
                    continue
                finally:
                    if getattr(s, "waited", 0):
                        c.waits += 1
                if self._in_window(started):
                    c.attempts += 1
                if self._in_window(time.monotonic()):
                    c.commits += 1
                break
            else:
                c.gave_up += 1

    # -- driver ---------------------------------------------------------

    def run(self) -> RunReport:
        spec = self.spec
        if self.shipper is not None:
            self.shipper.start()
        if self.replica is not None and spec.mode == "SSI_RSS":
            self.replica.start(self.cadence)
        if self.manager is not None:
            self.manager.start(self.cadence)
        old_switch = sys.getswitchinterval()
        if spec.switch_interval_ms > 0:
            sys.setswitchinterval(spec.switch_interval_ms / 1000.0)
        gc_was_enabled = gc.isenabled()
        if spec.pause_gc:
            gc.collect()
            gc.disable()
        t0 = time.monotonic()
        self.window = (t0 + spec.warmup, t0 + spec.warmup + spec.duration)
        stop = threading.Event()
        oltp = [_Counters() for _ in range(spec.oltp_clients)]
        olap = [_Counters() for _ in range(spec.olap_clients)]
        threads = [threading.Thread(target=self._oltp, args=(i, stop, c), daemon=True)
                   for i, c in enumerate(oltp)]
        threads += [threading.Thread(target=self._olap, args=(i, stop, c), daemon=True)
                    for i, c in enumerate(olap)]
        for t in threads:
            t.start()
        time.sleep(max(0.0, self.window[1] - time.monotonic()))
        stop.set()
        for t in threads:
            t.join(timeout=spec.deferrable_timeout + 5)
        if self.manager is not None:
            self.manager.stop()
        if self.shipper is not None:
            self.shipper.drain()
            self.shipper.stop()
        if self.replica is not None and spec.mode == "SSI_RSS":
            self.replica.stop()
        self.engine.close()
        sys.setswitchinterval(old_switch)
        try:
            # the audit allocates millions of small objects; keep the collector off
            return self._report(oltp, olap)
        finally:
            if spec.pause_gc and gc_was_enabled:
                gc.enable()

    def _report(self, oltp, olap) -> RunReport:
        spec = self.spec
        r = RunReport(spec)
        r.oltp_commits = sum(c.commits for c in oltp)
        r.olap_commits = sum(c.commits for c in olap)
        r.oltp_aborts = sum(c.aborts for c in oltp)
        r.prot_aborts = sum(c.aborts for c in olap)
        r.prot_waits = sum(c.waits for c in olap)
        r.attempts = sum(c.attempts for c in oltp + olap)
        r.aborts = r.oltp_aborts + r.prot_aborts
        r.gave_up = sum(c.gave_up for c in oltp + olap)
        r.oltp_tps = r.oltp_commits / spec.duration
        r.olap_qph = r.olap_commits * 3600.0 / spec.duration
        r.abort_rate = r.aborts / r.attempts if r.attempts else 0.0
        r.prot_wait_ms = self.engine.stats.prot_wait_seconds * 1000.0
        if self.lags:
            r.freshness_ms = statistics.fmean(self.lags) * 1000.0
            r.freshness_max_ms = max(self.lags) * 1000.0
        self._audit(r)
        if spec.mode == "SSI_RSS" and (r.prot_waits or r.prot_aborts):
            r.violations.append(f"read-only waits={r.prot_waits} aborts={r.prot_aborts} in {spec.label}")
        if spec.mode in ("SSI", "SSI_SAFESNAP", "SSI_RSS") and r.verdict not in ("serializable", "skipped"):
            r.violations.append(f"{spec.label} produced a {r.verdict} history")
        return r

    def audit_history(self) -> History:
        h = self.engine.export_history()
        if self.replica is None:
            return h
        return append_replica_sessions(h, self.replica.finished)

    def _audit(self, r: RunReport) -> None:
        h = self.audit_history()
        r.audit_ops = len(h.ops)
        if r.audit_ops > self.spec.audit_threshold:
            r.verdict = "skipped"
            return
        rep = classify_anomaly(committed_projection(h))
        if rep.serializable:
            r.verdict = "serializable"
        else:
            r.cycle = list(rep.cycle)
            if rep.read_only_anomaly:
                r.verdict = "read-only-anomaly"
                r.read_only = rep.read_only_anomaly.read_only
            else:
                r.verdict = "nonserializable"


def append_replica_sessions(h: History, sessions) -> History:
    """Place finished replica read-only sessions after the primary history.

    Each session becomes a read-only transaction with a fresh id. Its position
    does not matter for the dependency graph, only the versions it read.
    """
    ops = list(h.ops)
    seq = h.last_seq + 1
    txn = max(h.txn_ids(), default=0) + 1
    for s in sessions:
        ops.append(Operation(seq, txn, OpKind.BEGIN, protected=s.kind == "prot"))
        seq += 1
        for _, version, value in s.reads:
            ops.append(Operation(seq, txn, OpKind.READ, version, value))
            seq += 1
        ops.append(Operation(seq, txn, OpKind.COMMIT))
        seq += 1
        txn += 1
    return history_from_ops(ops, h.keys)


def run(spec: WorkloadSpec) -> RunReport:
    return _Run(spec).run()


def paired(spec: WorkloadSpec, modes, repetitions: int = 1) -> dict[str, list[RunReport]]:
    """Run each mode on the same seeds; seeds advance per repetition."""
    out: dict[str, list[RunReport]] = {m: [] for m in modes}
    for rep in range(repetitions):
        for m in modes:
            out[m].append(run(replace(spec, mode=m, seed=spec.seed + rep)))
    return out


def median(reports, attr: str) -> float:
    return statistics.median(getattr(r, attr) for r in reports)
