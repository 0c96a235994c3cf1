import random
import struct

import pytest
from hypothesis import given, strategies as st

from compartbft.messages import (
    DIGEST_SIZE, Checkpoint, Commit, FetchState, MalformedMessage, NewView, PreparedProof, PrePrepare, Prepare,
    ProvisionAck, Reply, Request, StateBlob, ViewChange, batch_digest, decode, describe, digest, message_seqnos,
)

u64 = st.integers(min_value=0, max_value=2**64 - 1)
small = st.integers(min_value=0, max_value=1000)
blob = st.binary(max_size=64)
dig = st.binary(min_size=DIGEST_SIZE, max_size=DIGEST_SIZE)

requests = st.builds(Request, blob, u64, u64, st.lists(st.binary(min_size=32, max_size=32), max_size=4).map(tuple))
preprepares = st.builds(PrePrepare, u64, u64, st.lists(requests, max_size=3).map(tuple), blob)
prepares = st.builds(Prepare, u64, u64, dig, small, blob)
commits = st.builds(Commit, u64, u64, dig, small, blob)
checkpoints = st.builds(Checkpoint, u64, u64, dig, small, blob)
proofs = st.builds(PreparedProof, preprepares, st.lists(prepares, max_size=2).map(tuple))
viewchanges = st.builds(ViewChange, u64, u64, st.lists(checkpoints, max_size=3).map(tuple),
                        st.lists(proofs, max_size=2).map(tuple), small, blob)
newviews = st.builds(NewView, u64, st.lists(viewchanges, max_size=2).map(tuple),
                     st.lists(preprepares, max_size=2).map(tuple), st.lists(checkpoints, max_size=2).map(tuple), blob)
messages = st.one_of(
    requests, preprepares, prepares, commits, checkpoints, viewchanges, newviews,
    st.builds(Reply, u64, u64, u64, small, blob, blob),
    st.builds(FetchState, u64, dig, small, blob),
    st.builds(StateBlob, u64, dig, blob, small, blob),
    st.builds(ProvisionAck, small, st.integers(0, 2), small, st.integers(0, 1), blob),
)


def test_digest_of_empty_input_is_the_sha256_constant():
    assert digest(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_digest_is_deterministic():
    m = Prepare(0, 1, bytes(32), 2)
    assert digest(m.wire) == digest(Prepare(0, 1, bytes(32), 2).wire)


def test_digests_distinct_over_random_distinct_messages():
    rng = random.Random(7)
    seen = {}
    for _ in range(10_000):
        m = Commit(rng.randrange(4), rng.randrange(10**6), rng.randbytes(32), rng.randrange(4))
        seen[m.wire] = digest(m.wire)
    assert len(set(seen.values())) == len(seen)


def test_preprepare_round_trip():
    pp = PrePrepare(0, 1, (Request(b"op", 1, 0, (b"x" * 32,)),), b"sig")
    assert decode(pp.wire) == pp


def test_two_encodes_are_byte_identical():
    a = ViewChange(1, 0, (), (), 2, b"s")
    b = ViewChange(1, 0, (), (), 2, b"s")
    assert a.wire == b.wire


def test_known_layout_of_a_prepare():
    # version, tag, then fixed-width big-endian fields and length-prefixed bytes
    p = Prepare(3, 9, b"\x11" * 32, 2, b"\xaa\xbb")
    expected = bytes((1, Prepare.TAG)) + struct.pack(">QQ", 3, 9) + struct.pack(">I", 32) + b"\x11" * 32
    expected += struct.pack(">Q", 2) + struct.pack(">I", 2) + b"\xaa\xbb"
    assert p.wire == expected
    assert p.body == expected[: -(4 + 2)]


def test_random_64_byte_inputs_never_decode_to_anything_but_malformed():
    rng = random.Random(0)
    accepted = 0
    for _ in range(100_000):
        data = rng.randbytes(64)
        try:
            decode(data)
            accepted += 1
        except MalformedMessage:
            pass
    assert accepted == 0


@pytest.mark.parametrize("data", [b"", b"\x01", b"\x02\x01", b"\x01\xff", bytes((1, Prepare.TAG)) + b"\x00" * 7])
def test_truncated_or_unknown_inputs_are_malformed(data):
    with pytest.raises(MalformedMessage):
        decode(data)


def test_trailing_bytes_are_rejected():
    with pytest.raises(MalformedMessage):
        decode(Prepare(0, 1, bytes(32), 1).wire + b"\x00")


def test_digest_field_must_have_digest_length():
    with pytest.raises(ValueError):
        Prepare(0, 1, b"short", 1).wire


def test_proof_is_not_a_top_level_message():
    proof = PreparedProof(PrePrepare(0, 1, ()), ())
    with pytest.raises(MalformedMessage):
        decode(proof.wire)


def test_null_batch_digest_is_stable():
    assert PrePrepare(0, 1, ()).d == batch_digest(()) == PrePrepare(5, 9, ()).d


def test_describe_carries_no_payload():
    req = Request(b"secret-op", 1, 0)
    text = repr(describe(PrePrepare(0, 1, (req,))))
    assert "secret" not in text


def test_seqnos_of_nested_messages():
    proof = PreparedProof(PrePrepare(0, 7, ()), ())
    assert message_seqnos(ViewChange(1, 0, (), (proof,), 0)) == [7]


@given(messages)
def test_round_trip_and_canonical(m):
    back = decode(m.wire)
    assert back == m
    assert back.wire == m.wire


@given(messages, st.data())
def test_single_byte_corruption_never_crashes(m, data):
    raw = bytearray(m.wire)
    pos = data.draw(st.integers(0, len(raw) - 1))
    raw[pos] ^= data.draw(st.integers(1, 255))
    try:
        out = decode(bytes(raw))
    except MalformedMessage:
        return
    assert out.wire == bytes(raw)
