"""A hand-wired four-replica test bed for driving compartments directly."""
from __future__ import annotations

from compartbft.apps import put
from compartbft.compartments import Confirmation, Execution, Preparation
from compartbft.config import CompartmentKind, Config, EnclaveId, primary_of
from compartbft.crypto import (
    ClientKey, ClientSession, ClusterKeys, SealingKey, attest_stub, client_mac, derive, seal_request,
    sign_message,
)
from compartbft.messages import (
    Checkpoint, Commit, NewView, PreparedProof, PrePrepare, Prepare, Request, ViewChange,
)

PREP, CONF, EXEC = CompartmentKind.PREPARATION, CompartmentKind.CONFIRMATION, CompartmentKind.EXECUTION
KINDS = {PREP: Preparation, CONF: Confirmation, EXEC: Execution}


class Bed:
    def __init__(self, f: int = 1, seed: int = 1, clients: int = 2, **cfg):
        self.cfg = Config.for_faults(f, **cfg)
        self.keys = ClusterKeys.generate(self.cfg, clients=range(clients), seed=seed)
        self.registry = self.keys.registry()
        self.sealing = SealingKey(self.keys.exec_sealing, b"exec")
        self.sessions = {c: ClientSession.create(c, self.cfg.n, seed=derive(seed, "client", c))
                         for c in range(clients)}
        self._t = {c: 0 for c in range(clients)}

    @property
    def n(self) -> int:
        return self.cfg.n

    def key(self, r: int, kind: CompartmentKind):
        return self.keys.enclaves[EnclaveId(r, kind)]

    def enclave(self, r: int, kind: CompartmentKind, attest: bool = True, app: str = "kvs"):
        if kind is EXEC:
            e = Execution(self.cfg, self.key(r, kind), self.registry, app, self.sealing)
        else:
            e = KINDS[kind](self.cfg, self.key(r, kind), self.registry)
        if attest and kind is not CONF:
            for c, session in self.sessions.items():
                attest_stub(session, self.keys.clients[c], self.registry, e)
        return e

    def sign(self, r: int, kind: CompartmentKind, msg):
        return sign_message(self.key(r, kind), msg)

    # messages -------------------------------------------------------------

    def request(self, c: int = 0, op: bytes | None = None, t: int | None = None, bad_mac: tuple = ()) -> Request:
        if t is None:
            self._t[c] += 1
            t = self._t[c]
        session = self.sessions[c]
        op = op if op is not None else put(b"k%d" % t, b"v%d" % t)
        req = Request(seal_request(session, op, t), t, c)
        tags = []
        for r in range(self.n):
            tag = client_mac(session.mac_keys[r], req.body)
            tags.append(bytes(32) if r in bad_mac else tag)
        return req.with_auth(tuple(tags))

    def preprepare(self, v: int, n: int, batch: tuple = (), signer: int | None = None) -> PrePrepare:
        signer = primary_of(v, self.cfg) if signer is None else signer
        return self.sign(signer, PREP, PrePrepare(v, n, tuple(batch)))

    def prepare(self, v: int, n: int, d: bytes, i: int) -> Prepare:
        return self.sign(i, PREP, Prepare(v, n, d, i))

    def commit(self, v: int, n: int, d: bytes, i: int) -> Commit:
        return self.sign(i, CONF, Commit(v, n, d, i))

    def checkpoint(self, n: int, d: bytes, i: int, v: int = 0) -> Checkpoint:
        return self.sign(i, EXEC, Checkpoint(v, n, d, i))

    def ckpt_cert(self, n: int, d: bytes, ids=None) -> tuple:
        if n == 0:
            return ()
        ids = range(self.cfg.quorum) if ids is None else ids
        return tuple(self.checkpoint(n, d, i) for i in ids)

    def proof(self, v: int, n: int, batch: tuple = ()) -> PreparedProof:
        pp = self.preprepare(v, n, batch)
        backups = [i for i in range(self.n) if i != primary_of(v, self.cfg)][: 2 * self.cfg.f]
        return PreparedProof(pp, tuple(self.prepare(v, n, pp.d, i) for i in backups))

    def viewchange(self, new_view: int, i: int, proofs: tuple = (), ckpt_n: int = 0,
                   ckpt_d: bytes = bytes(32)) -> ViewChange:
        cert = self.ckpt_cert(ckpt_n, ckpt_d)
        return self.sign(i, CONF, ViewChange(new_view, ckpt_n, cert, tuple(proofs), i))

    def newview(self, v: int, vcs, preprepares=None, ckpt_cert=None) -> NewView:
        from compartbft.compartments.base import newview_reissue

        vcs = tuple(vcs)
        if preprepares is None:
            _, entries = newview_reissue(vcs)
            preprepares = tuple(self.preprepare(v, n, b) for n, b in entries)
        if ckpt_cert is None:
            best = max(vcs, key=lambda vc: vc.ckpt_n)
            ckpt_cert = best.ckpt_cert
        return self.sign(primary_of(v, self.cfg), PREP, NewView(v, vcs, tuple(preprepares), tuple(ckpt_cert)))


def sent(fx, cls):
    """Messages of type ``cls`` in an Effects record's out log."""
    return [m for _, m in fx.out if isinstance(m, cls)]


def notes(fx, name):
    return [fields for kind, fields in fx.events if kind == name]


__all__ = ["Bed", "CONF", "EXEC", "PREP", "ClientKey", "notes", "sent"]
