"""Offline snapshot construction over a recorded history."""

from __future__ import annotations

from dataclasses import dataclass

from ..dsg import EdgeKind, build_dsg, verify_rss
from ..history import History, OpKind, committed_projection, txn_records, without
from .. import rss as _rss
from ..rss import DepGraphShard, RssSet, RssSnapshot, TxnClasses, classify, materialize


class InvalidPrefix(ValueError):
    pass


@dataclass(frozen=True)
class OfflineRss:
    at: int
    classes: TxnClasses
    deps: list[tuple[int, int]]
    rss: RssSet
    snapshot: RssSnapshot
    verified: bool

    def to_json(self) -> dict:
        return {
            "at": self.at,
            "done": sorted(self.classes.done),
            "clear": sorted(self.classes.clear),
            "active": sorted(self.classes.active),
            "aborted": sorted(self.classes.aborted),
            "rw_edges": [list(e) for e in self.deps],
            "rss": sorted(self.rss.members),
            "read_map": {k: {"version": str(v), "value": val}
                         for k, (v, val) in sorted(self.snapshot.read_map.items())},
            "verdict": "verified" if self.verified else "violated",
        }


def chains_of(h: History) -> dict[str, list[tuple[int, int, int]]]:
    """Per key (creator, value, commit position) in version order."""
    commit_at = h.commit_seqs()
    last_value: dict[tuple[str, int], int] = {}
    for op in h.ops:
        if op.kind is OpKind.WRITE:
            last_value[(op.version.key, op.txn)] = op.value
    return {
        key: [(v.creator, last_value.get((key, v.creator), 0), commit_at.get(v.creator, 0))
              for v in versions]
        for key, versions in h.version_order.items()
    }


def rss_at(h: History, at: int | None = None) -> OfflineRss:
    """Classify, construct, materialize and verify at prefix ``at``.

    Protected read-only transactions never take part: they are not shipped to
    the builder and are checked separately.
    """
    if at is None:
        at = h.last_seq
    if at < 0 or at > h.last_seq:
        raise InvalidPrefix(f"prefix {at} outside 0..{h.last_seq}")
    plain = without(h, h.protected_txns())
    classes = classify(txn_records(plain, at), max(at, plain.t0_commit_seq))
    proj = committed_projection(plain, at)
    g = build_dsg(proj)
    deps = DepGraphShard()
    edges = [(e.src, e.dst) for e in g.edges_of_kind(EdgeKind.RW)]
    for r, w in edges:
        deps.add(r, [w])
    # looked up at call time so an alternative builder can be swapped in
    rss = _rss.construct_rss(classes, deps)
    snap = materialize(rss, chains_of(proj))
    return OfflineRss(at, classes, edges, rss, snap, verify_rss(g, rss.members))


def builder_violations(h: History) -> list[int]:
    """Prefixes (end points) whose offline snapshot fails against the full run.

    The set built at a prefix must stay unreachable from transactions that
    commit later, otherwise a reader bound to it could close a cycle.
    """
    plain = without(h, h.protected_txns())
    g = build_dsg(committed_projection(plain))
    bad = []
    for op in plain.ops:
        if op.is_end:
            off = rss_at(h, op.seq)
            if not off.verified or not verify_rss(g, off.rss.members):
                bad.append(op.seq)
    return bad
