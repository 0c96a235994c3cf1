"""Key material, enclave signatures, client MACs and request/reply sealing.

This is the only module that touches private keys.  Enclave signatures are
Ed25519 over a domain-separated payload (the signer's compartment kind is
part of the signed bytes); client requests and replies are authenticated
with HMAC-SHA256 and sealed with ChaCha20-Poly1305.
"""
from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .config import CompartmentKind, Config, EnclaveId, primary_of
from . import messages as m

SIG_DOMAIN = b"compartbft/sig/v1"
MAC_SIZE = 32
NONCE_SIZE = 12

_SEALED = b"E"
_PLAIN = b"P"


class UnknownSender(KeyError):
    pass


class Tampered(ValueError):
    """AEAD open failed: wrong key, wrong context or mutated ciphertext."""


class AttestationRejected(Exception):
    pass


class WrongKind(ValueError):
    pass


def derive(seed: bytes | int | str, *labels) -> bytes:
    h = hashlib.sha256(b"compartbft/derive")
    h.update(str(seed).encode() if not isinstance(seed, bytes) else seed)
    for label in labels:
        h.update(b"\x00" + str(label).encode())
    return h.digest()


def _raw(pub) -> bytes:
    return pub.public_bytes(Encoding.Raw, PublicFormat.Raw)


def signing_payload(kind: CompartmentKind, body: bytes) -> bytes:
    return SIG_DOMAIN + bytes((int(kind),)) + body


class EnclaveKeyPair:
    """Signing and key-agreement keys of a single enclave.

    There is deliberately no accessor for the private halves.
    """

    __slots__ = ("id", "_sign", "_kex", "public", "kex_public")

    def __init__(self, enclave_id: EnclaveId, sign_seed: bytes, kex_seed: bytes):
        self.id = enclave_id
        self._sign = Ed25519PrivateKey.from_private_bytes(sign_seed)
        self._kex = X25519PrivateKey.from_private_bytes(kex_seed)
        self.public = _raw(self._sign.public_key())
        self.kex_public = _raw(self._kex.public_key())

    @classmethod
    def generate(cls, enclave_id: EnclaveId, seed: bytes | int | None = None) -> "EnclaveKeyPair":
        if seed is None:
            return cls(enclave_id, os.urandom(32), os.urandom(32))
        return cls(
            enclave_id,
            derive(seed, "sign", enclave_id.replica, int(enclave_id.kind)),
            derive(seed, "kex", enclave_id.replica, int(enclave_id.kind)),
        )

    def sign(self, body: bytes) -> bytes:
        return self._sign.sign(signing_payload(self.id.kind, body))

    def agree(self, peer_public: bytes) -> bytes:
        return self._kex.exchange(X25519PublicKey.from_public_bytes(peer_public))

    def _secret_fingerprints(self) -> list[bytes]:
        # harness-only: lets the taint checker look for leaked key bytes
        from cryptography.hazmat.primitives.serialization import NoEncryption, PrivateFormat
        return [
            self._sign.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption()),
            self._kex.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption()),
        ]


@dataclass(frozen=True)
class ClientIdentity:
    client: int
    public: bytes


class ClientKey:
    __slots__ = ("client", "_sign", "public")

    def __init__(self, client: int, seed: bytes | int | None = None):
        self.client = client
        raw = os.urandom(32) if seed is None else derive(seed, "client", client)
        self._sign = Ed25519PrivateKey.from_private_bytes(raw)
        self.public = _raw(self._sign.public_key())

    def sign(self, body: bytes) -> bytes:
        return self._sign.sign(SIG_DOMAIN + b"client" + body)


class KeyRegistry:
    """Public keys of every enclave and client; immutable after bootstrap."""

    def __init__(
        self,
        enclaves: Mapping[EnclaveId, tuple[bytes, bytes]],
        clients: Mapping[int, bytes] | None = None,
    ):
        self._enclaves = {eid: (bytes(a), bytes(b)) for eid, (a, b) in enclaves.items()}
        self._clients = dict(clients or {})
        self._pub = {eid: Ed25519PublicKey.from_public_bytes(k[0]) for eid, k in self._enclaves.items()}
        self._client_pub = {c: Ed25519PublicKey.from_public_bytes(k) for c, k in self._clients.items()}
        self._verify = lru_cache(maxsize=1 << 16)(self._verify_uncached)

    @classmethod
    def from_keys(cls, keys: Iterable[EnclaveKeyPair], clients: Iterable[ClientKey] = ()) -> "KeyRegistry":
        return cls({k.id: (k.public, k.kex_public) for k in keys}, {c.client: c.public for c in clients})

    def __contains__(self, eid) -> bool:
        return eid in self._enclaves

    def enclave_ids(self) -> list[EnclaveId]:
        return sorted(self._enclaves)

    def public_key(self, eid: EnclaveId) -> bytes:
        try:
            return self._enclaves[eid][0]
        except KeyError:
            raise UnknownSender(eid) from None

    def kex_key(self, eid: EnclaveId) -> bytes:
        try:
            return self._enclaves[eid][1]
        except KeyError:
            raise UnknownSender(eid) from None

    def client_key(self, client: int) -> bytes:
        try:
            return self._clients[client]
        except KeyError:
            raise UnknownSender(f"client {client}") from None

    def verify(self, sender: EnclaveId, body: bytes, signature: bytes) -> bool:
        if sender not in self._pub:
            raise UnknownSender(sender)
        return self._verify(sender, body, signature)

    def _verify_uncached(self, sender: EnclaveId, body: bytes, signature: bytes) -> bool:
        try:
            self._pub[sender].verify(signature, signing_payload(sender.kind, body))
            return True
        except InvalidSignature:
            return False

    def verify_client(self, client: int, body: bytes, signature: bytes) -> bool:
        pub = self._client_pub.get(client)
        if pub is None:
            return False
        try:
            pub.verify(signature, SIG_DOMAIN + b"client" + body)
            return True
        except InvalidSignature:
            return False

    # keystore file: one whitespace-separated record per line, hex keys
    def dump(self) -> str:
        lines = ["# compartbft keystore v1"]
        for eid in sorted(self._enclaves):
            sign_pub, kex_pub = self._enclaves[eid]
            lines.append(f"enclave {eid.replica} {eid.kind.short} {sign_pub.hex()} {kex_pub.hex()}")
        for c in sorted(self._clients):
            lines.append(f"client {c} {self._clients[c].hex()}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dump())

    @classmethod
    def parse(cls, text: str) -> "KeyRegistry":
        enclaves, clients = {}, {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "enclave" and len(parts) == 5:
                    eid = EnclaveId(int(parts[1]), CompartmentKind.parse(parts[2]))
                    enclaves[eid] = (bytes.fromhex(parts[3]), bytes.fromhex(parts[4]))
                elif parts[0] == "client" and len(parts) == 3:
                    clients[int(parts[1])] = bytes.fromhex(parts[2])
                else:
                    raise ValueError("unrecognised record")
            except ValueError as exc:
                raise ValueError(f"keystore line {lineno}: {exc}") from None
        return cls(enclaves, clients)

    @classmethod
    def load(cls, path: str | Path) -> "KeyRegistry":
        return cls.parse(Path(path).read_text())


# ------------------------------------------------------- message signatures


def expected_signer(msg, cfg: Config) -> EnclaveId | None:
    """The enclave whose key must have produced ``msg``'s signature."""
    P, C, E = CompartmentKind
    if isinstance(msg, m.PrePrepare):
        return EnclaveId(primary_of(msg.v, cfg), P)
    if isinstance(msg, m.NewView):
        return EnclaveId(primary_of(msg.v, cfg), P)
    if isinstance(msg, m.Prepare):
        return EnclaveId(msg.i, P)
    if isinstance(msg, (m.Commit, m.ViewChange)):
        return EnclaveId(msg.i, C)
    if isinstance(msg, (m.Checkpoint, m.FetchState, m.StateBlob)):
        return EnclaveId(msg.i, E)
    if isinstance(msg, m.ProvisionAck):
        return EnclaveId(msg.i, CompartmentKind(msg.kind))
    return None


def sign_message(keys: EnclaveKeyPair, msg):
    return msg.with_auth(keys.sign(msg.body))


def verify_message(registry: KeyRegistry, msg, cfg: Config) -> bool:
    signer = expected_signer(msg, cfg)
    if signer is None or signer.replica >= cfg.n:
        return False
    try:
        return registry.verify(signer, msg.body, getattr(msg, msg.AUTH))
    except UnknownSender:
        return False


# ------------------------------------------------------------ client MACs


def client_mac(key: bytes, body: bytes) -> bytes:
    return hmac.new(key, body, hashlib.sha256).digest()


def verify_client_mac(key: bytes, body: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(client_mac(key, body), tag)


# ----------------------------------------------------------------- sealing


def _aad(*fields: int) -> bytes:
    return b"".join(struct.pack(">Q", x) for x in fields)


@dataclass
class ClientSession:
    """Client-side session material.

    ``encrypt=False`` is the deliberately broken control mode used to show that
    the confidentiality checker is not vacuous.
    """

    client: int
    s_enc: bytes
    mac_keys: dict[int, bytes]
    nonce_counter: int = 0
    encrypt: bool = True

    @classmethod
    def create(cls, client: int, n: int, seed: bytes | int | None = None, encrypt: bool = True) -> "ClientSession":
        if seed is None:
            s_enc, macs = os.urandom(32), {r: os.urandom(32) for r in range(n)}
        else:
            s_enc = derive(seed, "s_enc", client)
            macs = {r: derive(seed, "mac", client, r) for r in range(n)}
        return cls(client, s_enc, macs, encrypt=encrypt)


@dataclass
class EnclaveSession:
    """What an enclave learns about a client through the attestation stub."""

    client: int
    mac_key: bytes
    s_enc: bytes | None = None
    encrypt: bool = True


def seal_request(session: ClientSession, plaintext: bytes, t: int) -> bytes:
    if not session.encrypt:
        return _PLAIN + plaintext
    session.nonce_counter += 1
    nonce = b"Q\x00\x00\x00" + struct.pack(">Q", session.nonce_counter)
    ct = ChaCha20Poly1305(session.s_enc).encrypt(nonce, plaintext, _aad(session.client, t))
    return _SEALED + nonce + ct


def open_request(session: EnclaveSession | ClientSession, ciphertext: bytes, t: int) -> bytes:
    return _open(session.s_enc, session.encrypt, ciphertext, _aad(session.client, t))


def seal_reply(session: EnclaveSession, replica: int, t: int, result: bytes) -> bytes:
    # nonce is a function of (replica, t): a cached reply re-sealed after state
    # transfer is byte-identical, and no two replicas share a nonce
    if not session.encrypt:
        return _PLAIN + result
    nonce = b"R" + struct.pack(">H", replica) + b"\x00" + struct.pack(">Q", t)
    ct = ChaCha20Poly1305(session.s_enc).encrypt(nonce, result, _aad(session.client, t, replica))
    return _SEALED + nonce + ct


def open_reply(session: ClientSession, replica: int, t: int, sealed: bytes) -> bytes:
    return _open(session.s_enc, session.encrypt, sealed, _aad(session.client, t, replica))


def _open(key: bytes | None, encrypt: bool, data: bytes, aad: bytes) -> bytes:
    if not encrypt:
        if data[:1] != _PLAIN:
            raise Tampered("expected plaintext envelope")
        return data[1:]
    if key is None or data[:1] != _SEALED or len(data) < 1 + NONCE_SIZE + 16:
        raise Tampered("bad envelope")
    nonce, ct = data[1:1 + NONCE_SIZE], data[1 + NONCE_SIZE:]
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ct, aad)
    except InvalidTag:
        raise Tampered("authentication failed") from None


class SealingKey:
    """Symmetric key for data the Execution enclaves hand to the environment."""

    __slots__ = ("_key", "_counter", "_label")

    def __init__(self, key: bytes, label: bytes):
        self._key = key
        self._counter = 0
        self._label = label

    def seal(self, plaintext: bytes, context: bytes = b"") -> bytes:
        # deterministic nonces keep simulation traces reproducible
        nonce = hashlib.sha256(self._label + context + plaintext).digest()[:NONCE_SIZE]
        return nonce + ChaCha20Poly1305(self._key).encrypt(nonce, plaintext, context)

    def open(self, sealed: bytes, context: bytes = b"") -> bytes:
        if len(sealed) < NONCE_SIZE + 16:
            raise Tampered("sealed blob too short")
        try:
            return ChaCha20Poly1305(self._key).decrypt(sealed[:NONCE_SIZE], sealed[NONCE_SIZE:], context)
        except InvalidTag:
            raise Tampered("sealed blob failed authentication") from None

    def _secret_fingerprints(self) -> list[bytes]:
        return [self._key]


# ------------------------------------------------------- attestation stub


def provision_message(
    session: ClientSession, client_key: ClientKey, registry: KeyRegistry,
    target: EnclaveId, eph_seed: bytes | None = None,
) -> m.Provision:
    """Build the one-shot session-provisioning message for ``target``.

    Session material is encrypted to the enclave's registered key-agreement
    key, so the environment relaying it learns nothing.
    """
    if target.kind == CompartmentKind.CONFIRMATION:
        raise WrongKind("clients only attest to Preparation and Execution enclaves")
    eph = X25519PrivateKey.from_private_bytes(eph_seed or os.urandom(32))
    shared = eph.exchange(X25519PublicKey.from_public_bytes(registry.kex_key(target)))
    material = session.mac_keys[target.replica]
    material += bytes((1 if session.encrypt else 0,))
    if target.kind == CompartmentKind.EXECUTION:
        material += session.s_enc
    key = derive(shared, "provision", session.client, target.replica, int(target.kind))
    sealed = ChaCha20Poly1305(key).encrypt(b"\x00" * NONCE_SIZE, material, b"provision")
    msg = m.Provision(session.client, int(target.kind), target.replica, _raw(eph.public_key()), sealed)
    return msg.with_auth(client_key.sign(msg.body))


def open_provision(keys: EnclaveKeyPair, registry: KeyRegistry, msg: m.Provision) -> EnclaveSession:
    """Enclave side of the stub handshake."""
    if not registry.verify_client(msg.c, msg.body, msg.sig):
        raise AttestationRejected("client signature invalid")
    if msg.kind != int(keys.id.kind) or msg.i != keys.id.replica:
        raise AttestationRejected("provision addressed to another enclave")
    shared = keys.agree(msg.eph_pub)
    key = derive(shared, "provision", msg.c, msg.i, msg.kind)
    try:
        material = ChaCha20Poly1305(key).decrypt(b"\x00" * NONCE_SIZE, msg.sealed, b"provision")
    except InvalidTag:
        raise AttestationRejected("provision material failed authentication") from None
    mac_key, encrypt, s_enc = material[:32], material[32] == 1, material[33:] or None
    if keys.id.kind == CompartmentKind.EXECUTION and s_enc is None:
        raise AttestationRejected("missing session key")
    return EnclaveSession(msg.c, mac_key, s_enc, encrypt)


def attest_stub(session: ClientSession, client_key: ClientKey, registry: KeyRegistry, enclave) -> EnclaveSession:
    """In-process attestation: provision ``enclave`` and wait for its answer.

    Raises :class:`WrongKind` for Confirmation enclaves and
    :class:`AttestationRejected` when the enclave refuses.
    """
    target = enclave.id
    prov = provision_message(session, client_key, registry, target,
                             eph_seed=derive(session.s_enc, "eph", target.replica, int(target.kind)))
    ack = enclave.provision(prov)
    if ack is None or not ack.ok:
        raise AttestationRejected(f"{target} rejected attestation")
    if not registry.verify(target, ack.body, ack.sig):
        raise AttestationRejected(f"{target} answered with a bad signature")
    return EnclaveSession(session.client, session.mac_keys[target.replica],
                          session.s_enc if target.kind == CompartmentKind.EXECUTION else None,
                          session.encrypt)


@dataclass
class ClusterKeys:
    """All key material of a cluster, as produced by bootstrap."""

    enclaves: dict[EnclaveId, EnclaveKeyPair]
    clients: dict[int, ClientKey] = field(default_factory=dict)
    exec_sealing: bytes = b""

    @classmethod
    def generate(cls, cfg: Config, clients: Iterable[int] = (), seed: bytes | int | None = None) -> "ClusterKeys":
        enclaves = {eid: EnclaveKeyPair.generate(eid, seed) for eid in cfg.enclaves()}
        cks = {c: ClientKey(c, seed) for c in clients}
        sealing = os.urandom(32) if seed is None else derive(seed, "exec-sealing")
        return cls(enclaves, cks, sealing)

    def registry(self) -> KeyRegistry:
        return KeyRegistry.from_keys(self.enclaves.values(), self.clients.values())

    def secret_fingerprints(self) -> list[bytes]:
        out = [self.exec_sealing]
        for k in self.enclaves.values():
            out.extend(k._secret_fingerprints())
        return out
