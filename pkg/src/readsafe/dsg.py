"""Direct serialization graph oracle.

Builds the conflict graph of a committed projection and answers the
questions the rest of the package needs to be checked against: is the
history serializable, is a non-serializable history a read-only anomaly,
is a set of transactions a read-safe snapshot, and does a read-only
transaction read exactly that snapshot.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

from .history import (
    T0,
    History,
    OpKind,
    TxnState,
    Version,
    restrict,
    txn_records,
)


class EdgeKind(enum.Enum):
    WW = "ww"
    WR = "wr"
    RW = "rw"


@dataclass(frozen=True)
class DependencyEdge:
    src: int
    dst: int
    kind: EdgeKind
    vulnerable: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError(f"self edge on T{self.src}")

    def key(self) -> tuple[int, int, str]:
        return (self.src, self.dst, self.kind.value)


@dataclass(frozen=True)
class Dsg:
    nodes: frozenset[int]
    edges: frozenset[DependencyEdge]
    intervals: dict[int, tuple[int, int]] = field(default_factory=dict, compare=False, hash=False)

    def successors(self) -> dict[int, list[int]]:
        adj: dict[int, set[int]] = {n: set() for n in self.nodes}
        for e in self.edges:
            adj[e.src].add(e.dst)
        return {n: sorted(s) for n, s in adj.items()}

    def edge_keys(self) -> set[tuple[int, int, str]]:
        return {e.key() for e in self.edges}

    def edges_of_kind(self, kind: EdgeKind) -> list[DependencyEdge]:
        return sorted((e for e in self.edges if e.kind is kind), key=DependencyEdge.key)


class MalformedProjection(ValueError):
    pass


def _overlap(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def build_dsg(proj: History) -> Dsg:
    records = txn_records(proj)
    bad = [t for t, r in records.items() if r.state is not TxnState.COMMITTED]
    if bad:
        raise MalformedProjection(f"uncommitted transactions in projection: {sorted(bad)}")
    nodes = frozenset(records)
    intervals = {t: (r.begin_seq, r.end_seq) for t, r in records.items()}

    position: dict[Version, int] = {}
    for vs in proj.version_order.values():
        for i, v in enumerate(vs):
            position[v] = i

    found: dict[tuple[int, int, EdgeKind], None] = {}

    def add(src: int, dst: int, kind: EdgeKind):
        if src != dst and src in nodes and dst in nodes:
            found[(src, dst, kind)] = None

    for vs in proj.version_order.values():
        for prev, nxt in zip(vs, vs[1:]):
            add(prev.creator, nxt.creator, EdgeKind.WW)

    for op in proj.ops:
        if op.kind is not OpKind.READ:
            continue
        v = op.version
        if v.creator == op.txn:
            # reading one's own write depends on nobody; the successor is
            # already ordered after us by the ww edge
            continue
        add(v.creator, op.txn, EdgeKind.WR)
        i = position.get(v)
        if i is None:
            continue
        chain = proj.version_order[v.key]
        if i + 1 < len(chain):
            add(op.txn, chain[i + 1].creator, EdgeKind.RW)

    edges = frozenset(
        DependencyEdge(s, d, k, _overlap(intervals[s], intervals[d])) for s, d, k in found
    )
    return Dsg(nodes, edges, intervals)


def find_cycle(g: Dsg) -> list[int] | None:
    """One cycle of ``g`` or None; rotated so its smallest member is first."""
    adj = g.successors()
    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(g.nodes, WHITE)
    for root in sorted(g.nodes):
        if color[root] != WHITE:
            continue
        stack: list[tuple[int, int]] = [(root, 0)]
        path = [root]
        color[root] = GREY
        while stack:
            node, i = stack[-1]
            succ = adj[node]
            if i < len(succ):
                stack[-1] = (node, i + 1)
                nxt = succ[i]
                if color[nxt] == GREY:
                    cycle = path[path.index(nxt):]
                    m = cycle.index(min(cycle))
                    return cycle[m:] + cycle[:m]
                if color[nxt] == WHITE:
                    color[nxt] = GREY
                    stack.append((nxt, 0))
                    path.append(nxt)
            else:
                color[node] = BLACK
                stack.pop()
                path.pop()
    return None


def _reach_set(adj: dict[int, list[int]], start: int) -> set[int]:
    seen = {start}
    todo = deque([start])
    while todo:
        for nxt in adj[todo.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return seen


def reachable(g: Dsg, src: int, dst: int) -> bool:
    for t in (src, dst):
        if t not in g.nodes:
            raise KeyError(f"T{t} is not a node of the graph")
    return dst in _reach_set(g.successors(), src)


def verify_rss(g: Dsg, candidate) -> bool:
    """True iff no transaction outside ``candidate`` reaches one inside it."""
    candidate = set(candidate)
    unknown = candidate - g.nodes
    if unknown:
        raise KeyError(f"unknown transactions in candidate: {sorted(unknown)}")
    adj = g.successors()
    for q in sorted(g.nodes - candidate):
        if _reach_set(adj, q) & candidate:
            return False
    return True


def snapshot_versions(h: History, rss) -> dict[str, Version]:
    """Per key, the version written by the latest-committing member of ``rss``."""
    rss = set(rss)
    out: dict[str, Version] = {}
    for key, chain in h.version_order.items():
        for v in reversed(chain):
            if v.creator in rss:
                out[key] = v
                break
    return out


def verify_prot(h: History, candidate: int, rss) -> bool:
    rss = set(rss)
    if candidate in rss:
        return False
    ops = h.ops_of(candidate)
    if not any(op.kind is OpKind.COMMIT for op in ops):
        raise ValueError(f"T{candidate} is not committed in the history")
    if any(op.kind is OpKind.WRITE for op in ops):
        return False
    wanted = snapshot_versions(h, rss)
    return all(wanted.get(op.version.key) == op.version for op in ops if op.kind is OpKind.READ)


@dataclass(frozen=True)
class ReadOnlyAnomaly:
    cycle: tuple[int, ...]
    read_only: int


@dataclass(frozen=True)
class AnomalyReport:
    serializable: bool
    cycle: tuple[int, ...] | None = None
    read_only_anomaly: ReadOnlyAnomaly | None = None

    @property
    def exit_code(self) -> int:
        if self.serializable:
            return 0
        return 3 if self.read_only_anomaly else 2

    def to_json(self) -> dict:
        roa = None
        if self.read_only_anomaly:
            roa = {"cycle": list(self.read_only_anomaly.cycle),
                   "read_only": self.read_only_anomaly.read_only}
        return {
            "serializable": self.serializable,
            "cycle": None if self.cycle is None else list(self.cycle),
            "read_only_anomaly": roa,
        }


def classify_anomaly(proj: History) -> AnomalyReport:
    g = build_dsg(proj)
    cycle = find_cycle(g)
    if cycle is None:
        return AnomalyReport(True)
    records = txn_records(proj)
    for s in sorted(cycle):
        if s == T0 or not records[s].read_only:
            continue
        rest = restrict(proj, [t for t in g.nodes if t != s])
        if find_cycle(build_dsg(rest)) is None:
            return AnomalyReport(False, tuple(cycle), ReadOnlyAnomaly(tuple(cycle), s))
    return AnomalyReport(False, tuple(cycle))
