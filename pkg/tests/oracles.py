"""Independent reference implementations used only by the tests.

Everything here is written from the definitions, deliberately without
sharing code with the package: a naive pairwise edge scan, boolean
transitive closure, and an exhaustive generator of small histories.
"""

from __future__ import annotations

import itertools
from pathlib import Path

from readsafe.history import T0, History, Operation, OpKind, Version, parse_history

CORPUS = Path(__file__).resolve().parents[1] / "src" / "readsafe" / "corpus"


def corpus(name: str) -> History:
    return parse_history((CORPUS / f"{name}.mvh").read_text())


def naive_edges(proj: History) -> set[tuple[int, int, str]]:
    """Edge set by scanning every ordered pair of committed transactions."""
    txns = sorted({op.txn for op in proj.ops})
    reads = {t: [op.version for op in proj.ops if op.txn == t and op.kind is OpKind.READ] for t in txns}
    writes = {t: {op.version.key for op in proj.ops if op.txn == t and op.kind is OpKind.WRITE}
              for t in txns}

    nxt = {}
    for chain in proj.version_order.values():
        for u, w in zip(chain, chain[1:]):
            nxt[u] = w.creator

    def successor(v: Version):
        return nxt.get(v)

    out = set()
    for a in txns:
        for b in txns:
            if a == b:
                continue
            for k in writes[a] & writes[b]:
                if successor(Version(k, a)) == b:
                    out.add((a, b, "ww"))
            if any(v.creator == a for v in reads[b]):
                out.add((a, b, "wr"))
            if any(v.creator != a and successor(v) == b for v in reads[a]):
                out.add((a, b, "rw"))
    return out


def closure(nodes, edges) -> dict[int, set[int]]:
    """Floyd–Warshall style reachability (paths of length >= 1)."""
    nodes = sorted(nodes)
    reach = {a: set() for a in nodes}
    for a, b in edges:
        reach[a].add(b)
    for k in nodes:
        for i in nodes:
            if k in reach[i]:
                reach[i] |= reach[k]
    return reach


def has_cycle_by_closure(nodes, edges) -> bool:
    reach = closure(nodes, edges)
    return any(n in reach[n] for n in reach)


# -- exhaustive small histories ------------------------------------------

KEYS = ("x", "y")
RW_TEMPLATE = [(("r", a), ("w", b)) for a in KEYS for b in KEYS]
ALL_PAIRS = [(o1, o2) for o1 in itertools.product("rw", KEYS) for o2 in itertools.product("rw", KEYS)]


def _build(programs, sources) -> History:
    """Transactions commit in id order; each foreign read names its writer."""
    ops: list[Operation] = []

    def emit(*a):
        ops.append(Operation(len(ops), *a))

    for k in KEYS:
        emit(T0, OpKind.WRITE, Version(k, T0), 0)
    emit(T0, OpKind.COMMIT)
    order = {k: [Version(k, T0)] for k in KEYS}
    src = iter(sources)
    for i, prog in enumerate(programs, start=1):
        emit(i, OpKind.BEGIN)
        own = set()
        for kind, k in prog:
            if kind == "w":
                own.add(k)
                emit(i, OpKind.WRITE, Version(k, i), i)
            elif k in own:
                emit(i, OpKind.READ, Version(k, i), i)
            else:
                w = next(src)
                emit(i, OpKind.READ, Version(k, w), w)
        emit(i, OpKind.COMMIT)
        for k in sorted(own):
            order[k].append(Version(k, i))
    return History(tuple(ops), {k: tuple(v) for k, v in order.items()})


def _source_choices(programs):
    """Per foreign read, every version of the key committed before the reader."""
    choices = []
    for i, prog in enumerate(programs, start=1):
        own = set()
        for kind, k in prog:
            if kind == "w":
                own.add(k)
            elif k not in own:
                choices.append([T0] + [j for j in range(1, i)
                                       if any(o == ("w", k) for o in programs[j - 1])])
    return choices


def enumerate_histories(max_txns: int, template, *, mirror: bool = True):
    """Every history of 1..max_txns transactions drawn from ``template``.

    Commit order is fixed to id order (any other order is a relabelling) and
    each read may observe any version committed before its transaction ends,
    which covers every interleaving of these programs as far as the
    dependency graph is concerned. With ``mirror`` the x/y swap of each
    history is skipped (the first operation of T1 is always on x).
    """
    for n in range(1, max_txns + 1):
        for programs in itertools.product(template, repeat=n):
            if mirror and programs[0][0][1] != "x":
                continue
            for sources in itertools.product(*_source_choices(programs)):
                yield _build(programs, sources)
