import random
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from readsafe.dsg import classify_anomaly
from readsafe.engine import Engine, Mode, TransactionAborted
from readsafe.harness.bench import append_replica_sessions
from readsafe.history import Version, committed_projection
from readsafe.wal import records as wal
from readsafe.wal.records import AbortRec, BeginRec, CommitRec, FeedbackMsg, RwDeps, WalRecord
from readsafe.wal.replica import OutOfOrder, Replica
from readsafe.wal.transport import Shipper, fixed, uniform

from scenarios import drive

KEYS = ["a", "b", "c", "d"]

payloads = st.one_of(
    st.builds(BeginRec, st.integers(1, 10**6), st.integers(0, 10**6)),
    st.builds(CommitRec, st.integers(1, 10**6), st.integers(1, 10**6), st.integers(0, 10**6),
              st.lists(st.tuples(st.sampled_from(KEYS), st.integers(-99, 99)), max_size=3).map(tuple),
              st.integers(0, 4)),
    st.builds(AbortRec, st.integers(1, 10**6), st.integers(0, 10**6)),
    st.builds(RwDeps, st.integers(1, 10**6), st.lists(st.integers(1, 10**6), max_size=4).map(tuple)),
)


@given(st.integers(1, 10**9), payloads)
def test_record_round_trip(lsn, payload):
    rec = WalRecord(lsn, payload)
    assert wal.decode(wal.encode(rec)) == rec


@pytest.mark.parametrize("line", [
    "not json", '{"lsn": 1, "t": "begin"}', '{"lsn": 1, "t": "mystery", "txn": 1}',
    '{"t": "feedback", "watermark": 3}',
])
def test_malformed_records(line):
    with pytest.raises(wal.WalFormatError):
        wal.decode(line)


def test_feedback_channel():
    msg = FeedbackMsg(42)
    assert wal.decode_feedback(wal.encode_feedback(msg)) == msg
    with pytest.raises(wal.WalFormatError):
        wal.decode_feedback('{"t": "begin"}')


def primary_with_wal(n=60, seed=1):
    eng = Engine(KEYS)
    log = eng.keep_wal()
    drive(eng, n, seed)
    return eng, log


def test_dump_and_load(tmp_path):
    _, log = primary_with_wal()
    path = tmp_path / "run.waljl"
    wal.dump(log, path)
    assert list(wal.load(path)) == log


def test_two_replicas_from_one_dump_are_identical(tmp_path):
    _, log = primary_with_wal(120, seed=5)
    path = tmp_path / "run.waljl"
    wal.dump(log, path)
    digests = []
    for shuffle_seed in (None, 3):
        r = Replica(KEYS)
        recs = list(wal.load(path))
        if shuffle_seed is not None:
            # arrival order differs, applied order may not
            random.Random(shuffle_seed).shuffle(recs)
            for i in range(0, len(recs), 7):
                r.receive(recs[i:i + 7])
                r.refresh()
        else:
            r.receive(recs)
        digests.append((r.refresh().digest(), dict(r.published.read_map)))
    assert digests[0] == digests[1]


def test_duplicates_and_gaps():
    _, log = primary_with_wal(30)
    r = Replica(KEYS)
    r.receive(log[5:10])
    assert r.applied_lsn == 0
    r.receive(log[:6])
    assert r.applied_lsn == 10 and r.duplicates == 1
    r.receive(log[:3])
    assert r.duplicates == 4
    with pytest.raises(OutOfOrder):
        r.apply(log[12])
    r.apply(log[10])
    assert r.applied_lsn == 11


def test_shipper_reconnect_resumes_after_applied():
    _, log = primary_with_wal(40, seed=2)
    r = Replica(KEYS)
    sh = Shipper(r, 0.0)
    sh.send(log[:20])
    sh.pump()
    sh.disconnect()
    sh.send(log[20:])
    assert sh.pump() == 0
    sh.reconnect()
    sh.drain()
    assert r.applied_lsn == log[-1].lsn and sh.pending() == 0


def test_shipper_duplicates_are_harmless():
    _, log = primary_with_wal(40, seed=4)
    clean, noisy = Replica(KEYS), Replica(KEYS)
    for rep, rate in ((clean, 0.0), (noisy, 1.0)):
        sh = Shipper(rep, 0.0, duplicate_rate=rate, rng=random.Random(1))
        for i in range(0, len(log), 5):
            sh.send(log[i:i + 5])
            sh.pump()
    assert noisy.duplicates > 0
    assert clean.refresh().digest() == noisy.refresh().digest()


def test_shipper_latency_orders_due_times():
    r = Replica(KEYS)
    sh = Shipper(r, uniform(0.0, 0.02, random.Random(3)))
    _, log = primary_with_wal(20)
    for rec in log:
        sh.send([rec])
    dues = [d for d, _ in sh._log]
    assert dues == sorted(dues)
    assert sh.pump(now=0.0) == 0
    sh.start()
    sh.drain(timeout=2)
    sh.stop()
    assert r.applied_lsn == log[-1].lsn
    assert fixed(0.5)() == 0.5


def test_freshness_within_two_cadences():
    cadence = 0.05
    eng = Engine(KEYS)
    r = Replica(KEYS)
    sh = Shipper(r, 0.0)
    eng.add_wal_sink(sh.send)
    drive(eng, 50, 9)
    committed = set(eng.export_history().commit_seqs())  # the primary is idle from here on
    sh.start()
    r.start(cadence)
    t0 = time.monotonic()
    while time.monotonic() - t0 < 2 * cadence + 0.5:
        if committed <= r.published.rss.members:
            break
        time.sleep(0.002)
    elapsed = time.monotonic() - t0
    r.stop()
    sh.stop()
    assert r.manager.classes().clear == committed
    assert elapsed <= 2 * cadence


def test_feedback_is_monotone_and_tracks_sessions():
    seen = []
    # one key, so the snapshot's oldest needed version is the latest member's
    r = Replica(["a"], feedback=lambda m: seen.append(m.watermark))
    eng = Engine(["a"])
    sh = Shipper(r, 0.0)
    eng.add_wal_sink(sh.send)
    si = None
    for i in range(6):
        s = eng.begin()
        s.write("a", i)
        s.commit()
        sh.pump()
        r.refresh()
        if i == 1:
            si = r.begin_si()
    assert r.watermark() == si.snapshot_seq == 2
    assert si.read("a")[0] == 1
    si.close()
    r.refresh()
    assert r.last_feedback == 6
    assert seen == sorted(seen)


def _hs_on_replica(kind):
    """T1/T2 on the primary, T3 on the replica bound after c1 is applied."""
    eng = Engine(["x", "y"], Mode.SSI)
    r = Replica(["x", "y"])
    r.keep_sessions = True
    sh = Shipper(r, 0.0)
    eng.add_wal_sink(sh.send)
    t1, t2 = eng.begin(), eng.begin()
    t2.read("x")
    t2.read("y")
    t1.read("y")
    t1.write("y", 20)
    t1.commit()
    sh.pump()
    r.refresh()
    t3 = r.begin_prot() if kind == "prot" else r.begin_si()
    reads = {k: t3.read(k) for k in ("x", "y")}
    t2.write("x", -11)
    t2.commit()
    t3.close()
    sh.pump()
    h = append_replica_sessions(eng.export_history(), r.finished)
    return reads, classify_anomaly(committed_projection(h))


def test_replica_si_session_can_observe_read_only_anomaly():
    reads, rep = _hs_on_replica("si")
    assert reads["y"] == (20, Version("y", 1))
    assert rep.read_only_anomaly is not None


def test_replica_protected_session_stays_serializable():
    reads, rep = _hs_on_replica("prot")
    assert reads == {"x": (0, Version("x", 0)), "y": (0, Version("y", 0))}
    assert rep.serializable


def test_replica_protected_reads_keep_primary_serializable():
    eng = Engine(KEYS)
    r = Replica(KEYS)
    r.keep_sessions = True
    sh = Shipper(r, 0.0)
    eng.add_wal_sink(sh.send)
    rng = random.Random(8)

    def maybe_read():
        sh.pump()
        if rng.random() < .5:
            r.refresh()
        s = r.begin_prot()
        for k in rng.sample(KEYS, 3):
            s.read(k)
        s.close()

    for seed in range(15):
        drive(eng, 12, seed, on_step=maybe_read)
    h = append_replica_sessions(eng.export_history(), r.finished)
    assert len(r.finished) > 50
    assert classify_anomaly(committed_projection(h)).serializable
