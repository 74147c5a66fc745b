"""Scripted engine interleavings shared by several test modules."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from readsafe.dsg import classify_anomaly
from readsafe.engine import Engine, Mode, TransactionAborted
from readsafe.history import committed_projection
from readsafe.rss import RssManager


@dataclass
class Replay:
    engine: Engine
    committed: list[int] = field(default_factory=list)
    aborted: list[int] = field(default_factory=list)
    t3_reads: dict = field(default_factory=dict)
    manager: RssManager | None = None

    @property
    def report(self):
        return classify_anomaly(committed_projection(self.engine.export_history()))


def replay_hs(mode: str) -> Replay:
    """The read-only anomaly schedule: T2 reads x,y; T1 updates y and commits;
    T3 starts and reads x,y; T2 writes x and commits; T3 commits.

    ``mode`` is "SI", "SSI" or "SSI_RSS" (T3 as a protected reader).
    """
    eng = Engine(["x", "y"], Mode.SI if mode == "SI" else Mode.SSI)
    out = Replay(eng)
    if mode == "SSI_RSS":
        out.manager = RssManager(eng.keys)
        eng.add_wal_sink(out.manager.enqueue)
        eng.attach_rss(out.manager)
    t1, t2 = eng.begin(), eng.begin()
    steps = [
        lambda: t2.read("x"), lambda: t2.read("y"),
        lambda: t1.read("y"), lambda: t1.write("y", 20), lambda: t1.commit(),
    ]
    sessions = {1: t1, 2: t2}

    def run(txn, step):
        s = sessions[txn]
        if not s.active:
            return None
        try:
            return step()
        except TransactionAborted:
            out.aborted.append(s.txn)
            return None

    for i, step in enumerate(steps):
        run(2 if i < 2 else 1, step)
    if out.manager is not None:
        out.manager.refresh()
    t3 = eng.begin(read_only=True, use_rss=mode == "SSI_RSS")
    sessions[3] = t3
    for k in ("x", "y"):
        got = run(3, lambda k=k: t3.read(k))
        if got is not None:
            out.t3_reads[k] = (got[1], got[0])
    run(2, lambda: t2.write("x", -11))
    run(2, lambda: t2.commit())
    run(3, lambda: t3.commit())
    out.committed = [s.txn for s in sessions.values() if s.state.name == "COMMITTED"]
    return out


def drive(eng, n, seed, on_step=None):
    """Random short transactions on one thread, ``on_step`` after every end."""
    rng = random.Random(seed)
    open_ = []
    for i in range(n):
        open_.append((eng.begin(), rng.randint(1, 3)))
        while open_ and (rng.random() < .6 or i == n - 1):
            idx = rng.randrange(len(open_))
            s, left = open_[idx]
            try:
                if left:
                    k = rng.choice(eng.keys)
                    if rng.random() < .5:
                        s.read(k)
                    else:
                        s.write(k, rng.randint(0, 99))
                    open_[idx] = (s, left - 1)
                    continue
                s.commit()
            except TransactionAborted:
                pass
            open_.pop(idx)
            if on_step:
                on_step()
