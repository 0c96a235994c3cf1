import random

import pytest
from hypothesis import given, strategies as st

from compartbft.apps import (
    BLOCK_SIZE, NOT_FOUND, OK, PARSE_ERROR, VALUE, KeyValueStore, KvsOp, Ledger, LedgerBlock, delete, get,
    make_app, put, verify_chain,
)

ops = st.one_of(
    st.builds(put, st.binary(max_size=4), st.binary(max_size=8)),
    st.builds(get, st.binary(max_size=4)),
    st.builds(delete, st.binary(max_size=4)),
    st.binary(max_size=12),
)


def test_put_then_get():
    kvs = KeyValueStore()
    assert kvs.apply(0, put(b"a", b"1")) == OK
    assert kvs.apply(0, get(b"a")) == VALUE + b"1"


def test_get_missing():
    assert KeyValueStore().apply(0, get(b"zz")) == NOT_FOUND


def test_delete():
    kvs = KeyValueStore()
    kvs.apply(0, put(b"a", b"1"))
    assert kvs.apply(0, delete(b"a")) == OK
    assert kvs.apply(0, delete(b"a")) == NOT_FOUND


def test_unparseable_op_is_a_noop():
    kvs = KeyValueStore()
    before = kvs.digest()
    assert kvs.apply(0, b"\xff\xfe") == PARSE_ERROR
    assert kvs.digest() == before


def test_op_encoding_round_trip():
    op = KvsOp("PUT", b"k", b"v")
    assert KvsOp.parse(op.encode()) == op


def test_empty_state_digests_are_constant():
    assert KeyValueStore().digest().hex() == "58ce2bfd84423cec88b5a295a63a754182d234b167112db412d74d18c865ae03"
    assert Ledger().digest().hex() == "ab65251a1bbdf3dc5b2fbfca0e5e6efb0813908a694350eaf50d8ee3d5be5294"


def test_randomized_determinism():
    rng = random.Random(4)
    seq = []
    for _ in range(1000):
        k = b"k%d" % rng.randrange(20)
        seq.append(rng.choice([put(k, b"%d" % rng.randrange(100)), get(k), delete(k)]))
    a, b = KeyValueStore(), KeyValueStore()
    ra = [a.apply(0, op) for op in seq]
    rb = [b.apply(0, op) for op in seq]
    assert ra == rb and a.digest() == b.digest()


def test_kvs_one_persist_record_per_batch():
    kvs = KeyValueStore()
    for i in range(200):
        kvs.apply(0, put(b"k%d" % i, b"v"))
    assert len(kvs.end_batch()) == 1
    assert kvs.end_batch() == []


@pytest.mark.parametrize("requests, blocks", [(5, 1), (4, 0), (200, 40), (12, 2)])
def test_ledger_blocks(requests, blocks):
    ledger = Ledger()
    for i in range(requests):
        ledger.apply(i % 3, b"tx%d" % i)
    records = ledger.end_batch()
    assert len(records) == blocks
    chain = [LedgerBlock.decode(r.payload) for r in records]
    assert all(len(b.entries) == BLOCK_SIZE for b in chain)
    assert verify_chain(chain)


def test_ledger_chain_tamper_detected():
    ledger = Ledger()
    for i in range(15):
        ledger.apply(0, b"tx%d" % i)
    chain = [LedgerBlock.decode(r.payload) for r in ledger.end_batch()]
    bad = LedgerBlock(chain[1].index, chain[1].prev_digest, (b"evil",) + chain[1].entries[1:])
    assert not verify_chain([chain[0], bad, chain[2]])


def test_ledger_keeps_blocks_until_acknowledged():
    ledger = Ledger()
    for i in range(10):
        ledger.apply(0, b"tx")
    ledger.end_batch()
    assert sorted(ledger.unacked) == [0, 1]
    ledger.acknowledge([0])
    assert sorted(ledger.unacked) == [1]


def test_unknown_app():
    with pytest.raises(ValueError):
        make_app("sql")


@given(st.lists(ops, max_size=40))
def test_kvs_snapshot_restore_identity(seq):
    a = KeyValueStore()
    for op in seq:
        a.apply(0, op)
    b = KeyValueStore()
    b.restore(a.snapshot())
    assert b.digest() == a.digest() and b.store == a.store


@given(st.lists(st.binary(max_size=8), max_size=30))
def test_ledger_snapshot_restore_identity(entries):
    a = Ledger()
    for e in entries:
        a.apply(1, e)
    b = Ledger()
    b.restore(a.snapshot())
    assert b.digest() == a.digest()
    # both continue identically
    assert a.apply(0, b"next") == b.apply(0, b"next")
    assert a.digest() == b.digest()


@given(st.lists(ops, max_size=40))
def test_kvs_is_deterministic(seq):
    a, b = KeyValueStore(), KeyValueStore()
    assert [a.apply(0, op) for op in seq] == [b.apply(0, op) for op in seq]
    assert a.digest() == b.digest()
