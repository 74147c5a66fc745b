"""Multiversion histories: operations, transactions, prefixes and the text DSL.

A history is a totally ordered list of operations. Transaction 0 is the
virtual initializer: it writes value 0 to every key the history mentions and
commits before any user operation. The version order of each key is the
commit order of the transactions that wrote it.

DSL tokens (whitespace separated, ``#`` starts a line comment)::

    bN            begin of transaction N
    pN            begin of a protected read-only transaction N
    rN(k,Tm,v)    N reads the version of k created by Tm (value v optional)
    wN(k,v)       N writes v to k
    cN / aN       commit / abort of N

A ``# keys: a b c`` comment declares extra keys for the initializer.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

T0 = 0


class OpKind(enum.Enum):
    BEGIN = "b"
    READ = "r"
    WRITE = "w"
    COMMIT = "c"
    ABORT = "a"


class TxnState(enum.Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass(frozen=True, order=True)
class Version:
    key: str
    creator: int

    def __str__(self) -> str:
        return f"{self.key}@T{self.creator}"


@dataclass(frozen=True)
class Operation:
    seq: int
    txn: int
    kind: OpKind
    version: Version | None = None
    value: int | None = None
    # Only meaningful on BEGIN: the transaction reads a read-safe snapshot.
    protected: bool = False

    @property
    def is_end(self) -> bool:
        return self.kind in (OpKind.COMMIT, OpKind.ABORT)


@dataclass(frozen=True)
class TxnRecord:
    txn: int
    begin_seq: int
    end_seq: int | None
    state: TxnState
    read_set: frozenset[Version] = frozenset()
    write_set: frozenset[Version] = frozenset()
    protected: bool = False

    @property
    def read_only(self) -> bool:
        return not self.write_set


@dataclass(frozen=True)
class History:
    ops: tuple[Operation, ...]
    version_order: Mapping[str, tuple[Version, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "version_order", dict(self.version_order))

    def __eq__(self, other):
        if not isinstance(other, History):
            return NotImplemented
        return self.ops == other.ops and self.version_order == other.version_order

    def __hash__(self):
        return hash(self.ops)

    def __len__(self) -> int:
        return len(self.ops)

    @property
    def keys(self) -> list[str]:
        return sorted(self.version_order)

    @property
    def last_seq(self) -> int:
        return self.ops[-1].seq if self.ops else -1

    @property
    def t0_commit_seq(self) -> int:
        for op in self.ops:
            if op.txn == T0 and op.kind is OpKind.COMMIT:
                return op.seq
        return -1

    def txn_ids(self) -> list[int]:
        seen = dict.fromkeys(op.txn for op in self.ops)
        return sorted(seen)

    def ops_of(self, txn: int) -> list[Operation]:
        return [op for op in self.ops if op.txn == txn]

    def protected_txns(self) -> set[int]:
        return {op.txn for op in self.ops if op.kind is OpKind.BEGIN and op.protected}

    def commit_seqs(self) -> dict[int, int]:
        return {op.txn: op.seq for op in self.ops if op.kind is OpKind.COMMIT}


class HistoryError(ValueError):
    """Base class for malformed histories."""


class HistorySyntaxError(HistoryError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column


class HistorySemanticError(HistoryError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f"{line}:{column}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.column = column


_TOKEN = re.compile(
    r"""
    (?P<kind>[bpca])(?P<txn>\d+)$
    | r(?P<rtxn>\d+)\((?P<rkey>[^\s,()]+),T(?P<rsrc>\d+)(?:,(?P<rval>-?\d+))?\)$
    | w(?P<wtxn>\d+)\((?P<wkey>[^\s,()]+),(?P<wval>-?\d+)\)$
    """,
    re.VERBOSE,
)
_KEYS_DIRECTIVE = re.compile(r"#\s*keys:(.*)$")


@dataclass
class _RawOp:
    txn: int
    kind: OpKind
    key: str | None = None
    source: int | None = None
    value: int | None = None
    protected: bool = False
    line: int = 0
    column: int = 0


def _tokenize(text: str) -> tuple[list[_RawOp], list[str]]:
    raw: list[_RawOp] = []
    declared: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        hash_at = line.find("#")
        if hash_at >= 0:
            m = _KEYS_DIRECTIVE.match(line[hash_at:])
            if m:
                declared.extend(m.group(1).split())
            line = line[:hash_at]
        for m in re.finditer(r"\S+", line):
            tok, col = m.group(0), m.start() + 1
            t = _TOKEN.match(tok)
            if t is None:
                raise HistorySyntaxError(f"unrecognised token {tok!r}", lineno, col)
            if t.group("kind"):
                kind = {"b": OpKind.BEGIN, "p": OpKind.BEGIN,
                        "c": OpKind.COMMIT, "a": OpKind.ABORT}[t.group("kind")]
                raw.append(_RawOp(int(t.group("txn")), kind,
                                  protected=t.group("kind") == "p", line=lineno, column=col))
            elif t.group("rtxn"):
                rval = t.group("rval")
                raw.append(_RawOp(int(t.group("rtxn")), OpKind.READ, t.group("rkey"),
                                  int(t.group("rsrc")), None if rval is None else int(rval),
                                  line=lineno, column=col))
            else:
                raw.append(_RawOp(int(t.group("wtxn")), OpKind.WRITE, t.group("wkey"),
                                  value=int(t.group("wval")), line=lineno, column=col))
    return raw, declared


def parse_history(text: str) -> History:
    raw, declared = _tokenize(text)
    keys = set(declared)
    keys.update(r.key for r in raw if r.key is not None)
    return _build(raw, sorted(keys))


def _build(raw: Iterable[_RawOp], keys: list[str]) -> History:
    ops: list[Operation] = []
    committed_values: dict[Version, int] = {}
    order: dict[str, list[Version]] = {k: [] for k in keys}

    def emit(txn, kind, version=None, value=None, protected=False):
        ops.append(Operation(len(ops), txn, kind, version, value, protected))

    for k in keys:
        emit(T0, OpKind.WRITE, Version(k, T0), 0)
        committed_values[Version(k, T0)] = 0
        order[k].append(Version(k, T0))
    emit(T0, OpKind.COMMIT)

    state: dict[int, TxnState] = {T0: TxnState.COMMITTED}
    pending: dict[int, dict[str, int]] = {}

    for r in raw:
        def fail(msg):
            raise HistorySemanticError(msg, r.line, r.column)

        if r.txn == T0:
            fail("T0 is implicit and cannot appear in a history")
        st = state.get(r.txn)
        if r.kind is OpKind.BEGIN:
            if st is not None:
                fail(f"duplicate begin of T{r.txn}")
            state[r.txn] = TxnState.ACTIVE
            pending[r.txn] = {}
            emit(r.txn, OpKind.BEGIN, protected=r.protected)
            continue
        if st is None:
            fail(f"T{r.txn} used before its begin")
        if st is TxnState.COMMITTED:
            fail(f"operation of T{r.txn} after its commit")
        if st is TxnState.ABORTED:
            fail(f"operation of T{r.txn} after its abort")

        if r.kind is OpKind.READ:
            v = Version(r.key, r.source)
            if r.source == r.txn:
                if r.key not in pending[r.txn]:
                    fail(f"T{r.txn} reads its own version of {r.key} before writing it")
                actual = pending[r.txn][r.key]
            elif v in committed_values:
                actual = committed_values[v]
            else:
                fail(f"read of version {v} that was never written by a committed transaction")
            if r.value is not None and r.value != actual:
                fail(f"read of {v} observes {r.value} but the version holds {actual}")
            emit(r.txn, OpKind.READ, v, actual)
        elif r.kind is OpKind.WRITE:
            pending[r.txn][r.key] = r.value
            emit(r.txn, OpKind.WRITE, Version(r.key, r.txn), r.value)
        elif r.kind is OpKind.COMMIT:
            state[r.txn] = TxnState.COMMITTED
            for k, val in pending.pop(r.txn).items():
                committed_values[Version(k, r.txn)] = val
                order[k].append(Version(k, r.txn))
            emit(r.txn, OpKind.COMMIT)
        else:
            state[r.txn] = TxnState.ABORTED
            pending.pop(r.txn)
            emit(r.txn, OpKind.ABORT)

    return History(tuple(ops), {k: tuple(v) for k, v in order.items()})


def history_from_ops(ops: Iterable[Operation], keys: Iterable[str]) -> History:
    """Rebuild a :class:`History` from already sequenced operations.

    ``ops`` must contain the initializer block. Used by the engine export,
    which already validated the operations as it produced them.
    """
    ops = tuple(ops)
    order: dict[str, list[Version]] = {k: [] for k in keys}
    writes: dict[int, list[Version]] = {}
    for op in ops:
        if op.kind is OpKind.WRITE:
            lst = writes.setdefault(op.txn, [])
            if op.version not in lst:
                lst.append(op.version)
        elif op.kind is OpKind.COMMIT:
            for v in writes.pop(op.txn, []):
                order.setdefault(v.key, []).append(v)
        elif op.kind is OpKind.ABORT:
            writes.pop(op.txn, None)
    return History(ops, {k: tuple(v) for k, v in order.items()})


def _token(op: Operation) -> str:
    n = op.txn
    if op.kind is OpKind.BEGIN:
        return f"{'p' if op.protected else 'b'}{n}"
    if op.kind is OpKind.READ:
        return f"r{n}({op.version.key},T{op.version.creator},{op.value})"
    if op.kind is OpKind.WRITE:
        return f"w{n}({op.version.key},{op.value})"
    return f"{op.kind.value}{n}"


def serialize_history(h: History, per_line: int = 16) -> str:
    header = "# implicit T0 writes 0 to every key and commits first\n"
    header += "# keys: " + " ".join(h.keys) + "\n"
    tokens = [_token(op) for op in h.ops if op.txn != T0]
    lines = [" ".join(tokens[i:i + per_line]) for i in range(0, len(tokens), per_line)]
    return header + "\n".join(lines) + ("\n" if lines else "")


def _clamp(h: History, upto: int | None) -> int:
    if upto is None:
        return h.last_seq
    return max(upto, h.t0_commit_seq)


def txn_records(h: History, upto: int | None = None) -> dict[int, TxnRecord]:
    """Per-transaction lifecycle as seen by the prefix ending at ``upto``.

    The initializer block is part of every prefix; its begin is reported as
    -1 so that it precedes every user begin.
    """
    upto = _clamp(h, upto)
    begin: dict[int, int] = {T0: -1}
    end: dict[int, int] = {}
    state: dict[int, TxnState] = {T0: TxnState.ACTIVE}
    reads: dict[int, set[Version]] = {T0: set()}
    writes: dict[int, set[Version]] = {T0: set()}
    protected: set[int] = set()
    for op in h.ops:
        if op.seq > upto:
            break
        t = op.txn
        if op.kind is OpKind.BEGIN:
            begin[t] = op.seq
            state[t] = TxnState.ACTIVE
            reads[t], writes[t] = set(), set()
            if op.protected:
                protected.add(t)
        elif op.kind is OpKind.READ:
            reads[t].add(op.version)
        elif op.kind is OpKind.WRITE:
            writes[t].add(op.version)
        elif op.kind is OpKind.COMMIT:
            end[t] = op.seq
            state[t] = TxnState.COMMITTED
        else:
            end[t] = op.seq
            state[t] = TxnState.ABORTED
    return {
        t: TxnRecord(t, begin[t], end.get(t), state[t], frozenset(reads[t]),
                     frozenset(writes[t]), t in protected)
        for t in begin
    }


def committed_projection(h: History, upto: int | None = None) -> History:
    """Operations of transactions whose commit lies inside the prefix.

    Original sequence numbers are kept so that begin/end positions of the
    surviving transactions remain comparable with the source history.
    """
    upto = _clamp(h, upto)
    committed = {op.txn for op in h.ops if op.kind is OpKind.COMMIT and op.seq <= upto}
    ops = tuple(op for op in h.ops if op.seq <= upto and op.txn in committed)
    order = {k: tuple(v for v in vs if v.creator in committed) for k, vs in h.version_order.items()}
    return History(ops, order)


def restrict(h: History, txns: Iterable[int]) -> History:
    """Sub-history over the given transactions only."""
    keep = set(txns)
    ops = tuple(op for op in h.ops if op.txn in keep)
    order = {k: tuple(v for v in vs if v.creator in keep) for k, vs in h.version_order.items()}
    return History(ops, order)


def without(h: History, txns: Iterable[int]) -> History:
    drop = set(txns)
    return restrict(h, [t for t in h.txn_ids() if t not in drop])
