import hashlib
import itertools

import pytest

from compartbft.certificates import CertKind, validate_members
from compartbft.config import CompartmentKind, Config, EnclaveId
from compartbft.crypto import (
    AttestationRejected, ClientKey, ClientSession, ClusterKeys, EnclaveKeyPair, KeyRegistry, SealingKey, Tampered,
    UnknownSender, WrongKind, attest_stub, client_mac, open_reply, open_request, provision_message, seal_reply,
    seal_request, sign_message, verify_client_mac, verify_message,
)
from compartbft.messages import Commit, PrePrepare, Prepare

from support import CONF, EXEC, PREP, Bed, notes, sent


@pytest.fixture(scope="module")
def bed():
    return Bed()


def test_sign_verify_round_trip(bed):
    key = bed.key(0, PREP)
    assert bed.registry.verify(key.id, b"hello", key.sign(b"hello"))


def test_flipped_bit_fails(bed):
    key = bed.key(0, PREP)
    sig = key.sign(b"hello")
    assert not bed.registry.verify(key.id, b"hellp", sig)
    bad = bytes([sig[0] ^ 1]) + sig[1:]
    assert not bed.registry.verify(key.id, b"hello", bad)


def test_unknown_sender(bed):
    with pytest.raises(UnknownSender):
        bed.registry.verify(EnclaveId(9, PREP), b"x", b"y" * 64)


def test_cross_kind_key_sweep_over_all_enclaves(bed):
    d = hashlib.sha256(b"m").digest()
    for eid in bed.cfg.enclaves():
        msg = sign_message(bed.keys.enclaves[eid], Prepare(0, 1, d, eid.replica))
        assert verify_message(bed.registry, msg, bed.cfg) == (eid.kind is PREP)
        # at the certificate layer too
        commits = [bed.commit(0, 1, d, i) for i in range(3) if i != eid.replica]
        forged = sign_message(bed.keys.enclaves[eid], Commit(0, 1, d, eid.replica))
        members = commits[:2] + [forged]
        assert validate_members(CertKind.COMMIT_QUORUM, members, bed.cfg, bed.registry) == (eid.kind is CONF)


def test_signatures_are_domain_separated_by_kind():
    # the same private seed used for two kinds still yields non-interchangeable signatures
    a = EnclaveKeyPair(EnclaveId(0, PREP), b"s" * 32, b"k" * 32)
    b = EnclaveKeyPair(EnclaveId(0, CONF), b"s" * 32, b"k" * 32)
    registry = KeyRegistry.from_keys([a, b])
    assert registry.verify(a.id, b"body", a.sign(b"body"))
    assert not registry.verify(b.id, b"body", a.sign(b"body"))


def test_seal_open_round_trip(bed):
    session = ClientSession.create(0, 4, seed=3)
    ct = seal_request(session, b"PUT k v", 1)
    assert b"PUT k v" not in ct
    assert open_request(session, ct, 1) == b"PUT k v"


def test_truncated_ciphertext_is_tampered():
    session = ClientSession.create(0, 4, seed=3)
    ct = seal_request(session, b"PUT k v", 1)
    with pytest.raises(Tampered):
        open_request(session, ct[:-1], 1)


def test_ciphertext_bound_to_timestamp():
    session = ClientSession.create(0, 4, seed=3)
    ct = seal_request(session, b"op", 1)
    with pytest.raises(Tampered):
        open_request(session, ct, 2)


def test_repeated_seals_never_collide():
    session = ClientSession.create(0, 4, seed=3)
    seals = {seal_request(session, b"same", 1) for _ in range(1000)}
    assert len(seals) == 1000


def test_reply_seal_depends_on_replica_and_is_stable():
    session = ClientSession.create(0, 4, seed=3)
    a = seal_reply(session, 0, 5, b"OK")
    assert a == seal_reply(session, 0, 5, b"OK")
    assert a != seal_reply(session, 1, 5, b"OK")
    assert open_reply(session, 0, 5, a) == b"OK"
    with pytest.raises(Tampered):
        open_reply(session, 1, 5, a)


def test_hmac_matches_reference_vector():
    # RFC 4231 test case 2
    tag = client_mac(b"Jefe", b"what do ya want for nothing?")
    assert tag.hex() == "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"


def test_mac_round_trip_and_sibling_key():
    session = ClientSession.create(0, 4, seed=3)
    tag = client_mac(session.mac_keys[0], b"body")
    assert verify_client_mac(session.mac_keys[0], b"body", tag)
    assert not verify_client_mac(session.mac_keys[1], b"body", tag)


def test_per_replica_mac_sweep():
    bed = Bed()
    for bad in range(4):
        req = bed.request(0, bad_mac=(bad,))
        for r in range(4):
            fx = bed.enclave(r, PREP).handle(req)
            rejected = bool(notes(fx, "bad_request_mac"))
            assert rejected == (r == bad)
            if r == 0:
                assert len(sent(fx, PrePrepare)) == (0 if rejected else 1)


def test_attest_to_execution_gives_session_key():
    bed = Bed()
    e = bed.enclave(0, EXEC, attest=False)
    session = attest_stub(bed.sessions[0], bed.keys.clients[0], bed.registry, e)
    assert session.s_enc == bed.sessions[0].s_enc
    assert e.sessions[0].s_enc == bed.sessions[0].s_enc
    p = bed.enclave(0, PREP, attest=False)
    attest_stub(bed.sessions[0], bed.keys.clients[0], bed.registry, p)
    assert p.sessions[0].s_enc is None
    assert p.sessions[0].mac_key == bed.sessions[0].mac_keys[0]


def test_attest_to_confirmation_is_wrong_kind():
    bed = Bed()
    with pytest.raises(WrongKind):
        attest_stub(bed.sessions[0], bed.keys.clients[0], bed.registry, bed.enclave(0, CONF))


def test_forced_rejection():
    bed = Bed()
    e = bed.enclave(2, EXEC, attest=False)
    e.reject_attestation = True
    with pytest.raises(AttestationRejected):
        attest_stub(bed.sessions[0], bed.keys.clients[0], bed.registry, e)


def test_provision_for_another_enclave_is_refused():
    bed = Bed()
    prov = provision_message(bed.sessions[0], bed.keys.clients[0], bed.registry, EnclaveId(1, EXEC))
    e = bed.enclave(2, EXEC, attest=False)
    ack = e.provision(prov)
    assert ack.ok == 0 and 0 not in e.sessions


def test_provision_signed_by_wrong_client_is_refused():
    bed = Bed()
    prov = provision_message(bed.sessions[0], ClientKey(0, seed=99), bed.registry, EnclaveId(1, EXEC))
    assert bed.enclave(1, EXEC, attest=False).provision(prov).ok == 0


def test_sealing_key_round_trip_and_context():
    key = SealingKey(b"\x01" * 32, b"exec")
    blob = key.seal(b"state", b"ctx")
    assert key.open(blob, b"ctx") == b"state"
    with pytest.raises(Tampered):
        key.open(blob, b"other")
    with pytest.raises(Tampered):
        key.open(blob[:5])


def test_registry_text_round_trip(tmp_path):
    keys = ClusterKeys.generate(Config(), clients=range(2), seed=5)
    reg = keys.registry()
    path = tmp_path / "keystore.txt"
    reg.write(path)
    back = KeyRegistry.load(path)
    assert back.dump() == reg.dump()
    for eid in Config().enclaves():
        assert back.public_key(eid) == reg.public_key(eid)


def test_seeded_keygen_is_reproducible():
    a = ClusterKeys.generate(Config(), clients=range(1), seed=5).registry().dump()
    b = ClusterKeys.generate(Config(), clients=range(1), seed=5).registry().dump()
    c = ClusterKeys.generate(Config(), clients=range(1), seed=6).registry().dump()
    assert a == b != c


def test_no_two_enclaves_share_a_key():
    keys = ClusterKeys.generate(Config(), seed=5).registry()
    pubs = [keys.public_key(e) for e in Config().enclaves()]
    assert len(set(pubs)) == len(pubs)
    assert all(a != b for a, b in itertools.combinations(pubs, 2))
