import csv
import io
import json
import sys
from dataclasses import replace

import pytest

from readsafe.harness import bench
from readsafe.harness.bench import CSV_FIELDS, WorkloadSpec, _Workload

SHORT = WorkloadSpec(duration=0.4, warmup=0.1, oltp_clients=3, olap_clients=2, key_count=200,
                     partitions=4, scan_size=40)


def test_workload_templates_depend_only_on_seed():
    a, b = _Workload(SHORT), _Workload(SHORT)
    ra, rb = a.client_rng("oltp", 2), b.client_rng("oltp", 2)
    for _ in range(50):
        assert a.oltp_template(ra, 2) == b.oltp_template(rb, 2)
    other = _Workload(replace(SHORT, seed=9))
    assert other.oltp_template(other.client_rng("oltp", 2), 2) != a.oltp_template(a.client_rng("oltp", 2), 2)


def test_oltp_template_shape():
    w = _Workload(SHORT)
    rng = w.client_rng("oltp", 0)
    for _ in range(100):
        lookups, writes = w.oltp_template(rng, 1)
        assert len(writes) == SHORT.write_txn_size == len(set(writes))
        assert len(lookups) == SHORT.lookup_size and not set(lookups) & set(writes)
        assert any(set(writes) <= set(p) for p in w.partitions)
    scan = w.olap_template(rng)
    assert len(scan) == SHORT.scan_size == len(set(scan))


@pytest.mark.parametrize("change,msg", [
    ({"mode": "SSI_SI"}, "single-node"),
    ({"mode": "SI", "replicated": True}, "replicated"),
    ({"partitions": 7}, "multiple"),
    ({"partitions": 100, "write_txn_size": 4}, "partition too small"),
    ({"olap_pause_every": 0}, "olap_pause_every"),
    ({"scan_size": 500}, "scan_size"),
    ({"duration": 0}, "duration"),
])
def test_validate(change, msg):
    with pytest.raises(ValueError, match=msg):
        replace(SHORT, **change).validate()


def test_short_rss_run_never_blocks_readers():
    before = sys.getswitchinterval()
    r = bench.run(replace(SHORT, mode="SSI_RSS"))
    assert sys.getswitchinterval() == before
    assert r.oltp_commits > 0 and r.olap_commits > 0
    assert (r.prot_waits, r.prot_aborts) == (0, 0)
    assert r.verdict == "serializable" and r.violations == []
    assert r.to_json()["prota"] == {"waits": 0, "aborts": 0}


def test_short_safesnap_run_is_serializable():
    r = bench.run(replace(SHORT, mode="SSI_SAFESNAP"))
    assert r.verdict == "serializable" and r.violations == []
    assert r.olap_commits > 0


def test_audit_threshold_skips_large_histories():
    r = bench.run(replace(SHORT, mode="SSI", audit_threshold=10))
    assert r.verdict == "skipped" and r.audit_ops > 10


def test_short_replicated_run():
    r = bench.run(replace(SHORT, mode="SSI_RSS", replicated=True, cadence_ms=20))
    assert r.olap_commits > 0 and r.verdict == "serializable"
    assert r.freshness_ms > 0


def test_csv_schema_and_paired_seeds():
    out = bench.paired(replace(SHORT, duration=0.2), ["SSI", "SSI_RSS"], repetitions=2)
    reports = out["SSI"] + out["SSI_RSS"]
    assert [r.spec.seed for r in out["SSI"]] == [1, 2]
    rows = list(csv.DictReader(io.StringIO(bench.csv_text(reports))))
    assert list(rows[0]) == CSV_FIELDS and len(rows) == 4
    assert {row["mode"] for row in rows} == {"SSI", "SSI_RSS"}
    json.dumps([r.to_json() for r in reports])
    assert bench.median(out["SSI"], "oltp_tps") > 0
