"""Command-line driver.

    readsafe check FILE
    readsafe rss FILE --at SEQ
    readsafe fuzz --seed S --txns N --keys K --iters I
    readsafe bench --mode M --oltp N --olap M --duration S --seed S [--replicated] [--latency MS]
    readsafe replicate ...            (bench with --replicated)

``check`` exits 0 for a serializable history, 2 for a non-serializable one and
3 for a read-only anomaly. Usage errors exit 64 and unreadable input 65, so
they never collide with a verdict.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from ..dsg import classify_anomaly
from ..engine import Mode
from ..history import (
    HistoryError,
    HistorySyntaxError,
    committed_projection,
    parse_history,
    serialize_history,
)
from . import bench, fuzz
from .offline import InvalidPrefix, rss_at

EXIT_USAGE = 64
EXIT_DATAERR = 65


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_source(name: str) -> tuple[str, str]:
    """Return (label, text). Falls back to the bundled corpus by file name."""
    p = Path(name)
    if p.exists():
        return str(p), p.read_text()
    corpus = resources.files("readsafe.corpus")
    for candidate in (name, f"{name}.mvh"):
        res = corpus.joinpath(candidate)
        if res.is_file():
            return f"<corpus>/{candidate}", res.read_text()
    raise FileNotFoundError(name)


def _load(name: str):
    label, text = _read_source(name)
    try:
        return parse_history(text)
    except HistoryError as e:
        sep = ":" if isinstance(e, HistorySyntaxError) else ": "
        raise HistoryError(f"{label}{sep}{e}") from None


def _dump(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


# -- subcommands ----------------------------------------------------------


def cmd_check(args) -> int:
    h = _load(args.file)
    rep = classify_anomaly(committed_projection(h))
    out = rep.to_json()
    out["file"] = args.file
    _dump(out)
    return rep.exit_code


def cmd_rss(args) -> int:
    h = _load(args.file)
    try:
        off = rss_at(h, args.at)
    except InvalidPrefix as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATAERR
    _dump(off.to_json())
    return 0 if off.verified else 1


def cmd_fuzz(args) -> int:
    if args.seek_anomaly:
        found = 0
        example = None
        for i in range(args.iters):
            h, hit = fuzz.seek_read_only_anomaly(args.seed + i, keys=max(args.keys, 2))
            if hit:
                found += 1
                example = example or h
        _dump({"runs": args.iters, "read_only_anomalies": found})
        if example is not None and args.out:
            Path(args.out).write_text(serialize_history(example) + "\n")
        return 0
    cfg = fuzz.FuzzConfig(txns=args.txns, keys=args.keys, prot_readers=args.prot,
                          mode=Mode(args.mode))
    summary = fuzz.campaign(args.seed, args.iters, cfg, stop_on_failure=not args.keep_going)
    _dump(summary.to_json())
    if summary.counterexample is not None:
        target = Path(args.out) if args.out else Path(f"counterexample-{args.seed}.mvh")
        target.write_text(summary.counterexample + "\n")
        print(f"counterexample written to {target}", file=sys.stderr)
        return 1
    return 0


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 0:
        raise argparse.ArgumentTypeError("client counts must be non-negative")
    return values


def _modes(text: str, replicated: bool) -> list[str]:
    if text == "all":
        return list(bench.REPLICATED_MODES if replicated else bench.SINGLE_MODES)
    return [m.strip().upper() for m in text.split(",") if m.strip()]


def _write_plot(directory: Path, reports) -> list[Path]:
    """One gnuplot data block per metric: rows are client mixes, columns modes."""
    directory.mkdir(parents=True, exist_ok=True)
    modes = list(dict.fromkeys(r.spec.label for r in reports))
    mixes = list(dict.fromkeys((r.spec.oltp_clients, r.spec.olap_clients) for r in reports))
    cells: dict[tuple, list] = {}
    for r in reports:
        cells.setdefault((r.spec.oltp_clients, r.spec.olap_clients, r.spec.label), []).append(r)
    written = []
    for metric in ("oltp_tps", "olap_qph", "abort_rate", "freshness_ms"):
        path = directory / f"{metric}.dat"
        lines = [f"# {metric}: median over repetitions", "# oltp olap " + " ".join(modes)]
        for oltp, olap in mixes:
            row = [str(oltp), str(olap)]
            for m in modes:
                rs = cells.get((oltp, olap, m))
                row.append(f"{bench.median(rs, metric):.6g}" if rs else "?")
            lines.append(" ".join(row))
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written


def cmd_bench(args) -> int:
    replicated = args.replicated or args.command == "replicate"
    cadence = float(os.environ.get("RSS_CADENCE_MS", args.cadence))
    base = bench.WorkloadSpec(
        replicated=replicated, duration=args.duration, warmup=args.warmup, seed=args.seed,
        key_count=args.keys, partitions=args.partitions, write_txn_size=args.write_size,
        lookup_size=args.lookups, scan_size=args.scan, home_affinity=args.home_affinity,
        latency_ms=args.latency, cadence_ms=cadence, op_delay_ms=args.op_delay,
        retry_cap=args.retry_cap, audit_threshold=args.audit_threshold,
    )
    modes = _modes(args.mode, replicated)
    specs = []
    for oltp in args.oltp:
        for olap in args.olap:
            for rep in range(args.repetitions):
                for m in modes:
                    s = replace(base, mode=m, oltp_clients=oltp, olap_clients=olap, seed=args.seed + rep)
                    try:
                        s.validate()
                    except ValueError as e:
                        print(f"error: {e}", file=sys.stderr)
                        return EXIT_USAGE
                    specs.append(s)
    reports = []
    first = True
    for s in specs:
        r = bench.run(s)
        reports.append(r)
        if args.format == "csv":
            sys.stdout.write(bench.csv_text([r], header=first))
            sys.stdout.flush()
        else:
            _dump(r.to_json())
        first = False
    if args.plot:
        for p in _write_plot(Path(args.plot), reports):
            print(f"wrote {p}", file=sys.stderr)
    bad = [v for r in reports for v in r.violations]
    for v in bad:
        print(f"violation: {v}", file=sys.stderr)
    return 1 if bad else 0


# -- wiring ---------------------------------------------------------------


def _bench_args(p: argparse.ArgumentParser, replicated_default: bool) -> None:
    p.add_argument("--mode", default="all",
                   help="mode or comma list (SSI, SSI_SAFESNAP, SSI_RSS, SI; replicated: SSI_SI, SSI_RSS) or 'all'")
    p.add_argument("--oltp", type=_int_list, default=[8], help="OLTP clients (comma list sweeps)")
    p.add_argument("--olap", type=_int_list, default=[4], help="OLAP clients (comma list sweeps)")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--warmup", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=1)
    if not replicated_default:
        p.add_argument("--replicated", action="store_true")
    else:
        p.set_defaults(replicated=True)
    p.add_argument("--latency", type=float, default=0.0, help="log shipping latency in ms")
    p.add_argument("--cadence", type=float, default=100.0,
                   help="construction cadence in ms (RSS_CADENCE_MS overrides)")
    p.add_argument("--keys", type=int, default=1000)
    p.add_argument("--partitions", type=int, default=10)
    p.add_argument("--write-size", type=int, default=4)
    p.add_argument("--lookups", type=int, default=2)
    p.add_argument("--scan", type=int, default=200)
    p.add_argument("--home-affinity", type=float, default=0.9)
    p.add_argument("--op-delay", type=float, default=0.5, help="simulated per-operation latency in ms")
    p.add_argument("--retry-cap", type=int, default=10)
    p.add_argument("--audit-threshold", type=int, default=2_000_000)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--plot", metavar="DIR", help="write gnuplot data files into DIR")
    p.set_defaults(func=cmd_bench)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="readsafe", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("check", help="classify a history file")
    p.add_argument("file", help=".mvh path or bundled corpus name (hs, serial, writeskew, ...)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("rss", help="offline snapshot construction at a prefix")
    p.add_argument("file")
    p.add_argument("--at", type=int, default=None, help="operation sequence number (default: end)")
    p.set_defaults(func=cmd_rss)

    p = sub.add_parser("fuzz", help="randomized engine runs checked by the oracle")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--txns", type=int, default=8)
    p.add_argument("--keys", type=int, default=4)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--prot", type=int, default=2, help="protected readers per run")
    p.add_argument("--mode", choices=[m.value for m in Mode], default="SSI")
    p.add_argument("--keep-going", action="store_true")
    p.add_argument("--seek-anomaly", action="store_true",
                   help="SI engine, replay the read-only anomaly shape with noise")
    p.add_argument("--out", help="where to write a counterexample history")
    p.set_defaults(func=cmd_fuzz)

    _bench_args(sub.add_parser("bench", help="mixed OLTP/OLAP workload"), False)
    _bench_args(sub.add_parser("replicate", help="bench against a log-shipped replica"), True)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: no such file or corpus entry: {e.args[0] if e.args else e}", file=sys.stderr)
        return EXIT_DATAERR
    except HistoryError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATAERR


if __name__ == "__main__":
    sys.exit(main())
