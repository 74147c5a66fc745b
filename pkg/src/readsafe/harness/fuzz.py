"""Randomized schedules through the engine, checked against the oracle.

Each run interleaves a handful of short transactions on one thread (so the
schedule is a pure function of the seed), injects protected readers bound to
whatever snapshot is published when they begin, refreshes the snapshot
builder at random points and then checks every property on the exported
history.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable

from ..dsg import build_dsg, classify_anomaly, find_cycle, verify_prot, verify_rss
from ..engine import Engine, Mode, TransactionAborted, VersionReclaimed
from ..history import (
    History,
    OpKind,
    committed_projection,
    history_from_ops,
    serialize_history,
    txn_records,
    without,
)
from ..rss import RssManager, classify
from .offline import builder_violations, rss_at

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FuzzConfig:
    txns: int = 8
    keys: int = 4
    prot_readers: int = 2
    max_ops: int = 4
    read_only_rate: float = 0.2
    abort_rate: float = 0.05
    refresh_rate: float = 0.3
    gc_every: int = 4
    mode: Mode = Mode.SSI


@dataclass(frozen=True)
class Violation:
    prop: str
    detail: str


@dataclass
class RunResult:
    seed: int
    history: History
    published: list = field(default_factory=list)
    bindings: dict = field(default_factory=dict)
    manager_clear: list = field(default_factory=list)
    violations: list[Violation] = field(default_factory=list)
    aborts: int = 0
    commits: int = 0


def _programs(rng: random.Random, cfg: FuzzConfig, keys: list[str]):
    progs = []
    for _ in range(cfg.txns):
        n = rng.randint(1, cfg.max_ops)
        if rng.random() < cfg.read_only_rate:
            progs.append(("ro", [("r", rng.choice(keys)) for _ in range(n)]))
            continue
        ops = [(rng.choice("rw"), rng.choice(keys)) for _ in range(n)]
        if all(op == "r" for op, _ in ops):
            ops[rng.randrange(n)] = ("w", rng.choice(keys))
        progs.append(("rw", ops))
    for _ in range(cfg.prot_readers):
        progs.append(("prot", [("r", k) for k in rng.sample(keys, rng.randint(1, len(keys)))]))
    return progs


def execute(seed: int, cfg: FuzzConfig = FuzzConfig()) -> RunResult:
    """Run one seeded schedule; properties are checked by :func:`check`."""
    rng = random.Random(seed)
    keys = [f"k{i}" for i in range(cfg.keys)]
    eng = Engine(keys, cfg.mode, gc_every=cfg.gc_every)
    mgr = RssManager(keys, keep_history=True)
    eng.add_wal_sink(mgr.enqueue)
    eng.attach_rss(mgr)
    progs = _programs(rng, cfg, keys)
    res = RunResult(seed, History(()))

    def refresh():
        mgr.refresh()
        res.manager_clear.append(mgr.history[-1])

    # state per program: [session or None, next op index, finished]
    state = [[None, 0, False] for _ in progs]
    live = list(range(len(progs)))
    value = 0
    while live:
        i = rng.choice(live)
        st = state[i]
        kind, ops = progs[i]
        try:
            if st[0] is None:
                st[0] = eng.begin(read_only=kind == "ro", use_rss=kind == "prot")
                if kind == "prot":
                    res.bindings[st[0].txn] = st[0].snapshot.rss
            elif st[1] < len(ops):
                op, key = ops[st[1]]
                st[1] += 1
                if op == "r":
                    st[0].read(key)
                else:
                    value += 1
                    st[0].write(key, value)
            elif kind != "prot" and rng.random() < cfg.abort_rate:
                st[0].abort()
                st[2] = True
            else:
                st[0].commit()
                st[2] = True
        except TransactionAborted:
            st[2] = True
            res.aborts += 1
        except VersionReclaimed as exc:
            res.violations.append(Violation("retention", str(exc)))
            st[0].abort()
            st[2] = True
        if st[2]:
            live.remove(i)
        if rng.random() < cfg.refresh_rate:
            refresh()
    refresh()
    res.history = eng.export_history()
    res.published = list(mgr.history)
    res.commits = eng.stats.commits
    return res


# -- properties -----------------------------------------------------------


def _ssi_invariant_violations(plain: History) -> list[Violation]:
    """Structural facts every SSI-accepted history satisfies.

    * commit order: no edge points to a transaction that ended before the
      source began;
    * cross order: an edge against begin order is a vulnerable rw edge;
    * clear source: in a two-edge chain ending in Clear(p) whose middle
      transaction is outside Clear(p), the first transaction is in Clear(p).
    """
    out = []
    records = txn_records(plain)
    proj = committed_projection(plain)
    g = build_dsg(proj)
    iv = g.intervals
    for e in g.edges:
        b, a = e.src, e.dst  # edge T_b -> T_a
        if iv[a][1] < iv[b][0]:
            out.append(Violation("ssi-commit-order", f"T{b}->T{a} ({e.kind.value}) but T{a} ended before T{b} began"))
        if iv[a][0] < iv[b][1] and not (e.vulnerable and e.kind.value == "rw"):
            out.append(Violation("ssi-cross-order", f"cross-order edge T{b}->T{a} ({e.kind.value}) not vulnerable rw"))
    into: dict[int, set[int]] = {}
    for e in g.edges:
        into.setdefault(e.dst, set()).add(e.src)
    ends = sorted({op.seq for op in plain.ops if op.is_end})
    for p in ends:
        cl = classify(records if p >= plain.last_seq else txn_records(plain, p), p).clear
        for c in cl:
            for u in into.get(c, ()):
                if u in cl:
                    continue
                for v in into.get(u, ()):
                    if v not in cl:
                        out.append(Violation("ssi-clear-source", f"T{v}->T{u}->T{c} at prefix {p}: T{v} not Clear"))
    return out


def check(res: RunResult, cfg: FuzzConfig = FuzzConfig(), rng: random.Random | None = None) -> list[Violation]:
    h = res.history
    out = list(res.violations)
    prot = h.protected_txns()
    plain = without(h, prot)
    full_proj = committed_projection(h)
    plain_proj = committed_projection(plain)
    g_plain = build_dsg(plain_proj)

    if cfg.mode is Mode.SSI:
        cyc = find_cycle(g_plain)
        if cyc is not None:
            out.append(Violation("ssi-acyclic", f"cycle {cyc}"))
        cyc = find_cycle(build_dsg(full_proj))
        if cyc is not None:
            out.append(Violation("prot-acyclic", f"cycle with protected readers {cyc}"))
        out.extend(_ssi_invariant_violations(plain))

    seen = set()
    for rs in res.published if cfg.mode is Mode.SSI else ():
        if rs.members in seen:
            continue
        seen.add(rs.members)
        at_basis = build_dsg(committed_projection(plain, rs.basis_prefix))
        if not verify_rss(at_basis, rs.members):
            out.append(Violation("rss", f"epoch {rs.epoch} {sorted(rs.members)} at prefix {rs.basis_prefix}"))
        if not verify_rss(g_plain, rs.members):
            out.append(Violation("rss-final", f"epoch {rs.epoch} {sorted(rs.members)} against final projection"))
        offline = classify(txn_records(plain, rs.basis_prefix), max(rs.basis_prefix, plain.t0_commit_seq))
        if offline.clear != rs.clear:
            out.append(Violation("clear", f"epoch {rs.epoch}: builder {sorted(rs.clear)} vs {sorted(offline.clear)}"))

    committed = {op.txn for op in full_proj.ops if op.kind is OpKind.COMMIT}
    for txn, rs in res.bindings.items():
        if txn in committed and not verify_prot(full_proj, txn, rs.members):
            out.append(Violation("prot", f"T{txn} bound to epoch {rs.epoch}"))

    if rng is not None and cfg.mode is Mode.SSI:
        at = rng.randint(0, h.last_seq)
        off = rss_at(h, at)
        if not off.verified or not verify_rss(g_plain, off.rss.members):
            out.append(Violation("offline-rss", f"prefix {at}"))
    return out


# -- shrinking ------------------------------------------------------------


def _drop_read(h: History, seq: int) -> History:
    return history_from_ops([op for op in h.ops if op.seq != seq], h.keys)


def history_violations(h: History) -> list[str]:
    """History-only properties (everything but builder state), for shrinking."""
    names = []
    prot = h.protected_txns()
    plain = without(h, prot)
    if find_cycle(build_dsg(committed_projection(plain))) is not None:
        names.append("ssi-acyclic")
    if find_cycle(build_dsg(committed_projection(h))) is not None:
        names.append("prot-acyclic")
    names.extend(sorted({v.prop for v in _ssi_invariant_violations(plain)}))
    if builder_violations(h):
        names.append("builder")
    return names


def shrink(h: History, failing: Callable[[History], bool], max_rounds: int = 50) -> History:
    """Greedy minimization: drop whole transactions, then single reads."""
    for _ in range(max_rounds):
        changed = False
        for t in [t for t in h.txn_ids() if t != 0]:
            cand = without(h, [t])
            if failing(cand):
                h, changed = cand, True
        for op in [op for op in h.ops if op.kind is OpKind.READ]:
            cand = _drop_read(h, op.seq)
            if failing(cand):
                h, changed = cand, True
        if not changed:
            break
    return h


# -- campaign -------------------------------------------------------------


@dataclass
class CampaignSummary:
    runs: int = 0
    violations: int = 0
    by_property: dict = field(default_factory=dict)
    published_sets: int = 0
    prot_reads_checked: int = 0
    read_only_anomalies: int = 0
    commits: int = 0
    aborts: int = 0
    counterexample: str | None = None
    first_failure: dict | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def campaign(seed: int, iterations: int, cfg: FuzzConfig = FuzzConfig(),
             stop_on_failure: bool = True, progress: Callable[[int], None] | None = None) -> CampaignSummary:
    summary = CampaignSummary()
    master = random.Random(seed)
    for i in range(iterations):
        run_seed = master.getrandbits(48)
        res = execute(run_seed, cfg)
        found = check(res, cfg, random.Random(run_seed))
        summary.runs += 1
        summary.published_sets += len({rs.members for rs in res.published})
        summary.prot_reads_checked += sum(
            1 for op in res.history.ops if op.kind is OpKind.READ and op.txn in res.bindings)
        summary.commits += res.commits
        summary.aborts += res.aborts
        if cfg.mode is Mode.SI:
            rep = classify_anomaly(committed_projection(res.history))
            if rep.read_only_anomaly:
                summary.read_only_anomalies += 1
        if progress:
            progress(i)
        if not found:
            continue
        summary.violations += len(found)
        for v in found:
            summary.by_property[v.prop] = summary.by_property.get(v.prop, 0) + 1
        if summary.counterexample is None:
            summary.first_failure = {"seed": run_seed, "violations": [v.__dict__ for v in found]}
            props = set(history_violations(res.history)) if cfg.mode is Mode.SSI else set()
            if props:
                small = shrink(res.history, lambda c: bool(props & set(history_violations(c))))
            else:
                small = res.history
            summary.counterexample = serialize_history(small)
        if stop_on_failure:
            break
    return summary


# -- anomaly seeking ------------------------------------------------------


def seek_read_only_anomaly(seed: int, noise: int = 2, keys: int = 4) -> tuple[History, bool]:
    """Replay the three-transaction read-only anomaly shape on random keys.

    A pivot reads two keys, a writer updates one of them and commits, a
    read-only transaction then observes the writer but not the pivot, and
    the pivot finally overwrites the other key. Random noise transactions on
    unrelated keys are interleaved. Returns the history and whether the
    oracle classified it as a read-only anomaly.
    """
    rng = random.Random(seed)
    names = [f"k{i}" for i in range(keys)]
    a, b = rng.sample(names, 2)
    others = [k for k in names if k not in (a, b)] or names
    eng = Engine(names, Mode.SI)
    pivot = eng.begin()
    pivot.read(a)
    pivot.read(b)

    def jitter():
        for _ in range(rng.randint(0, noise)):
            s = eng.begin()
            k = rng.choice(others)
            s.read(k)
            if k not in (a, b):
                try:
                    s.write(k, rng.randint(1, 100))
                except TransactionAborted:
                    continue
            s.commit()

    jitter()
    w = eng.begin()
    w.read(b)
    w.write(b, 20)
    w.commit()
    jitter()
    ro = eng.begin(read_only=True)
    ro.read(a)
    ro.read(b)
    ro.commit()
    pivot.write(a, -11)
    pivot.commit()
    h = eng.export_history()
    rep = classify_anomaly(committed_projection(h))
    return h, rep.read_only_anomaly is not None

