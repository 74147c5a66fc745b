import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from readsafe.history import (
    T0,
    HistorySemanticError,
    HistorySyntaxError,
    OpKind,
    TxnState,
    Version,
    committed_projection,
    parse_history,
    restrict,
    serialize_history,
    txn_records,
    without,
)

from oracles import corpus


def test_initializer_block_writes_every_key():
    h = parse_history("b1 r1(a,T0,0) w1(b,5) c1")
    assert h.keys == ["a", "b"]
    head = h.ops[:3]
    assert [(op.txn, op.kind) for op in head] == [(T0, OpKind.WRITE), (T0, OpKind.WRITE), (T0, OpKind.COMMIT)]
    assert h.t0_commit_seq == 2
    assert h.version_order == {"a": (Version("a", 0),), "b": (Version("b", 0), Version("b", 1))}


def test_declared_keys_join_the_initializer():
    h = parse_history("# keys: z\nb1 r1(a,T0) c1")
    assert h.keys == ["a", "z"]


def test_read_value_is_filled_from_the_version():
    h = parse_history("b1 w1(x,7) c1 b2 r2(x,T1) c2")
    (read,) = [op for op in h.ops if op.kind is OpKind.READ]
    assert read.value == 7


def test_version_order_follows_commit_order_not_write_order():
    h = parse_history("b1 b2 w1(x,1) w2(x,2) c2 c1")
    assert [v.creator for v in h.version_order["x"]] == [0, 2, 1]


def test_own_write_read_back():
    h = parse_history("b1 w1(x,4) r1(x,T1,4) c1")
    assert h.ops[-2].version == Version("x", 1)


@pytest.mark.parametrize("text,line,col,fragment", [
    ("b1 r1(x T0) c1", 1, 4, "unrecognised"),
    ("b1\n  x1", 2, 3, "unrecognised"),
    ("w1(x,1)", 1, 1, "before its begin"),
    ("b1 b1", 1, 4, "duplicate begin"),
    ("b1 c1 w1(x,1)", 1, 7, "after its commit"),
    ("b1 a1 c1", 1, 7, "after its abort"),
    ("b1 r1(x,T2) c1", 1, 4, "never written"),
    ("b1 w1(x,1) c1 b2 r2(x,T1,3) c2", 1, 18, "observes 3"),
    ("b1 r1(x,T1) c1", 1, 4, "before writing it"),
    ("b0", 1, 1, "implicit"),
])
def test_errors_carry_location(text, line, col, fragment):
    with pytest.raises((HistorySyntaxError, HistorySemanticError)) as info:
        parse_history(text)
    assert info.value.line == line and info.value.column == col
    assert fragment in str(info.value)


def test_uncommitted_write_is_not_readable():
    with pytest.raises(HistorySemanticError):
        parse_history("b1 w1(x,1) b2 r2(x,T1) c2 c1")


def test_txn_records_at_prefix():
    h = corpus("hs")
    # seq 10 is c1: T1 done, T2 and T3 still running
    recs = txn_records(h, 10)
    assert recs[0].begin_seq == -1 and recs[0].state is TxnState.COMMITTED
    assert recs[1].state is TxnState.COMMITTED and recs[1].end_seq == 10
    assert recs[2].state is TxnState.ACTIVE and recs[2].end_seq is None
    assert recs[3].read_only
    assert recs[1].write_set == {Version("y", 1)}
    full = txn_records(h)
    assert full[2].end_seq == 14 and full[3].end_seq == 15


def test_projection_keeps_sequence_numbers():
    h = parse_history("b1 b2 w1(x,1) w2(y,2) a2 c1 b3 r3(y,T0) c3")
    p = committed_projection(h)
    assert 2 not in p.txn_ids()
    assert [op.seq for op in p.ops if op.txn == 1] == [3, 5, 8]
    assert p.version_order["y"] == (Version("y", 0),)
    early = committed_projection(h, 9)
    assert early.txn_ids() == [0, 1]


def test_restrict_and_without_agree():
    h = corpus("hs")
    assert restrict(h, [0, 1, 2]) == without(h, [3])
    assert without(h, [1]).version_order["y"] == (Version("y", 0),)


def test_protected_begin_round_trips():
    h = parse_history("b1 w1(x,1) c1 p2 r2(x,T1) c2")
    assert h.protected_txns() == {2}
    assert "p2" in serialize_history(h)


def test_corpus_round_trip():
    for name in ("hs", "hs_replay", "serial", "writeskew"):
        h = corpus(name)
        assert parse_history(serialize_history(h)) == h


# -- generated histories ----------------------------------------------------


@st.composite
def histories(draw):
    """Random well-formed DSL texts: reads only of already committed versions."""
    keys = draw(st.lists(st.sampled_from("abcd"), min_size=1, max_size=3, unique=True))
    n = draw(st.integers(1, 5))
    pending = {t: draw(st.integers(1, 4)) for t in range(1, n + 1)}
    committed = {k: [0] for k in keys}
    state, writes, tokens, protected = {}, {}, [], set()
    while pending or any(s == "open" for s in state.values()):
        choices = [t for t in pending if t not in state] + [t for t, s in state.items() if s == "open"]
        t = draw(st.sampled_from(sorted(choices)))
        if t not in state:
            state[t], writes[t] = "open", {}
            if draw(st.booleans()) and t % 2:
                protected.add(t)
                tokens.append(f"p{t}")
            else:
                tokens.append(f"b{t}")
            continue
        if pending.get(t, 0) == 0:
            pending.pop(t, None)
            if draw(st.booleans()) or not writes[t]:
                tokens.append(f"c{t}")
                for k, v in writes[t].items():
                    committed[k].append(t)
            else:
                tokens.append(f"a{t}")
            state[t] = "closed"
            continue
        pending[t] -= 1
        k = draw(st.sampled_from(keys))
        if t in protected or draw(st.booleans()):
            src = draw(st.sampled_from(committed[k]))
            tokens.append(f"r{t}({k},T{src})")
        else:
            v = draw(st.integers(-50, 50))
            writes[t][k] = v
            tokens.append(f"w{t}({k},{v})")
    return " ".join(tokens)


@settings(max_examples=150, deadline=None)
@given(histories())
def test_serialize_parse_round_trip(text):
    h = parse_history(text)
    again = parse_history(serialize_history(h))
    assert again == h
    assert serialize_history(again) == serialize_history(h)


@settings(max_examples=100, deadline=None)
@given(histories(), st.integers(0, 60))
def test_projection_is_prefix_monotone(text, cut):
    h = parse_history(text)
    cut = min(cut, h.last_seq)
    small, big = committed_projection(h, cut), committed_projection(h)
    assert set(small.txn_ids()) <= set(big.txn_ids())
    for k, chain in small.version_order.items():
        assert chain == big.version_order[k][:len(chain)]
