import pytest

from readsafe import rss as rss_mod
from readsafe.engine import Mode
from readsafe.harness import fuzz
from readsafe.harness.offline import builder_violations
from readsafe.history import parse_history

from oracles import corpus


def _builder_returns_done(classes, deps, epoch=1):
    return rss_mod.RssSet(classes.done, classes.prefix, epoch, classes.clear)


def test_small_campaign_is_clean():
    s = fuzz.campaign(1, 200)
    assert s.runs == 200 and s.violations == 0, s.first_failure
    assert s.published_sets > 200 and s.prot_reads_checked > 0
    assert s.commits > 0 and s.aborts > 0


def test_same_seed_same_history():
    a, b = fuzz.execute(42), fuzz.execute(42)
    assert a.history == b.history
    assert [rs.members for rs in a.published] == [rs.members for rs in b.published]


def test_si_campaign_skips_serializability_checks():
    s = fuzz.campaign(2, 60, fuzz.FuzzConfig(mode=Mode.SI))
    assert s.runs == 60 and s.violations == 0


@pytest.mark.parametrize("seed", range(10))
def test_seeking_read_only_anomaly_under_si(seed):
    h, found = fuzz.seek_read_only_anomaly(seed)
    assert found
    assert "ssi-acyclic" in fuzz.history_violations(h)


def test_ssi_invariants_hold_on_clean_runs():
    for seed in range(40):
        h = fuzz.execute(seed).history
        assert fuzz.history_violations(h) == [], seed


def test_invariant_checker_flags_cross_order_wr():
    # T2 commits after T1 began yet T1 reads T2's version: the edge runs against start order
    h = parse_history("b1 b2 w2(x,1) c2 r1(x,T2) w1(y,1) c1")
    assert "ssi-cross-order" in fuzz.history_violations(h)


def test_offline_builder_agrees_on_corpus():
    assert builder_violations(corpus("hs")) == []


def test_planted_builder_fault_is_caught(monkeypatch):
    monkeypatch.setattr(rss_mod, "construct_rss", _builder_returns_done)
    assert builder_violations(corpus("hs"))
    s = fuzz.campaign(3, 500)
    assert s.violations > 0 and "offline-rss" in s.by_property
    small = parse_history(s.counterexample)
    assert "builder" in fuzz.history_violations(small)
    assert len([op for op in small.ops if op.txn != 0]) <= 10


def test_shrink_keeps_property_and_is_minimal_for_hs():
    h = corpus("hs")
    small = fuzz.shrink(h, lambda c: "ssi-acyclic" in fuzz.history_violations(c))
    assert "ssi-acyclic" in fuzz.history_violations(small)
    assert len(small.ops) <= len(h.ops)
