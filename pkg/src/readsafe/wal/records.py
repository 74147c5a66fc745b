"""WAL record types and their JSON-lines wire format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Union


@dataclass(frozen=True)
class BeginRec:
    txn: int
    hseq: int


@dataclass(frozen=True)
class CommitRec:
    txn: int
    commit_seq: int
    hseq: int
    writes: tuple[tuple[str, int], ...] = ()
    # Number of outgoing rw edges announced by the RwDeps record that follows.
    rw: int = 0


@dataclass(frozen=True)
class AbortRec:
    txn: int
    hseq: int


@dataclass(frozen=True)
class RwDeps:
    txn: int
    writers: tuple[int, ...]


Payload = Union[BeginRec, CommitRec, AbortRec, RwDeps]


@dataclass(frozen=True)
class WalRecord:
    lsn: int
    payload: Payload


@dataclass(frozen=True)
class FeedbackMsg:
    watermark: int


class WalFormatError(ValueError):
    pass


def to_dict(rec: WalRecord) -> dict:
    p = rec.payload
    if isinstance(p, BeginRec):
        return {"lsn": rec.lsn, "t": "begin", "txn": p.txn, "hseq": p.hseq}
    if isinstance(p, CommitRec):
        d = {"lsn": rec.lsn, "t": "commit", "txn": p.txn, "seq": p.commit_seq,
             "hseq": p.hseq, "writes": [[k, v] for k, v in p.writes]}
        if p.rw:
            d["rw"] = p.rw
        return d
    if isinstance(p, AbortRec):
        return {"lsn": rec.lsn, "t": "abort", "txn": p.txn, "hseq": p.hseq}
    return {"lsn": rec.lsn, "t": "rwdeps", "txn": p.txn, "writers": list(p.writers)}


def from_dict(d: dict) -> WalRecord:
    try:
        t = d["t"]
        if t == "begin":
            payload = BeginRec(d["txn"], d["hseq"])
        elif t == "commit":
            payload = CommitRec(d["txn"], d["seq"], d["hseq"],
                                tuple((k, v) for k, v in d["writes"]), d.get("rw", 0))
        elif t == "abort":
            payload = AbortRec(d["txn"], d["hseq"])
        elif t == "rwdeps":
            payload = RwDeps(d["txn"], tuple(d["writers"]))
        else:
            raise WalFormatError(f"unknown record type {t!r}")
        return WalRecord(d["lsn"], payload)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, WalFormatError):
            raise
        raise WalFormatError(f"malformed record {d!r}: {exc}") from exc


def encode(rec: WalRecord) -> str:
    return json.dumps(to_dict(rec), separators=(",", ":"))


def decode(line: str) -> WalRecord:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise WalFormatError(str(exc)) from exc
    if isinstance(d, dict) and d.get("t") == "feedback":
        raise WalFormatError("feedback messages travel on the reverse channel")
    return from_dict(d)


def encode_feedback(msg: FeedbackMsg) -> str:
    return json.dumps({"t": "feedback", "watermark": msg.watermark}, separators=(",", ":"))


def decode_feedback(line: str) -> FeedbackMsg:
    d = json.loads(line)
    if d.get("t") != "feedback":
        raise WalFormatError(f"not a feedback message: {line!r}")
    return FeedbackMsg(d["watermark"])


def dump(records: Iterable[WalRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(encode(rec) + "\n")


def load(path: str | Path) -> Iterator[WalRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield decode(line)
