"""Execution compartment: commit quorums, in-order execution, replies and checkpoints."""
from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field

from ..apps import Application, make_app
from ..certificates import CertKind, ConflictingCertificates, InsufficientQuorum, assemble_certificate
from ..config import CompartmentKind, in_window
from ..crypto import SealingKey, Tampered, client_mac, open_request, seal_reply, verify_client_mac
from ..messages import (
    Checkpoint, Commit, FetchState, NewView, PrePrepare, Reply, Request, StateBlob, digest, describe,
)
from .base import (
    Compartment, Effects, PersistAck, RequestBatch, newview_proof_valid, to_client, to_replica,
)

# How far below a client's newest executed timestamp a request may still be
# executed.  With one outstanding request per client this is the classic
# "t > last_rep_t" rule; the window lets open-loop clients have several
# requests in flight that get ordered out of timestamp order.
CLIENT_WINDOW = 64
MAX_DIGESTS_PER_SLOT = 4

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


@dataclass
class ClientRecord:
    last_t: int = 0
    results: dict[int, bytes] = field(default_factory=dict)

    def prune(self) -> None:
        floor = self.last_t - CLIENT_WINDOW
        for t in [t for t in self.results if t <= floor]:
            del self.results[t]


def encode_state(app_snapshot: bytes, clients: dict[int, ClientRecord]) -> bytes:
    """Canonical checkpoint state: application snapshot plus reply bookkeeping.

    Sealed replies are replica-specific and deliberately left out; they are
    re-derived from the plaintext results.
    """
    out = [_U32.pack(len(app_snapshot)), app_snapshot, _U32.pack(len(clients))]
    for c in sorted(clients):
        rec = clients[c]
        out += [_U64.pack(c), _U64.pack(rec.last_t), _U32.pack(len(rec.results))]
        for t in sorted(rec.results):
            r = rec.results[t]
            out += [_U64.pack(t), _U32.pack(len(r)), r]
    return b"".join(out)


def decode_state(blob: bytes) -> tuple[bytes, dict[int, ClientRecord]]:
    pos = 0

    def take(k: int) -> bytes:
        nonlocal pos
        if pos + k > len(blob):
            raise ValueError("truncated state")
        chunk = blob[pos:pos + k]
        pos += k
        return chunk

    app = take(_U32.unpack(take(4))[0])
    clients = {}
    for _ in range(_U32.unpack(take(4))[0]):
        c = _U64.unpack(take(8))[0]
        rec = ClientRecord(_U64.unpack(take(8))[0])
        for _ in range(_U32.unpack(take(4))[0]):
            t = _U64.unpack(take(8))[0]
            rec.results[t] = take(_U32.unpack(take(4))[0])
        clients[c] = rec
    if pos != len(blob):
        raise ValueError("trailing bytes in state")
    return app, clients


class Execution(Compartment):
    KIND = CompartmentKind.EXECUTION

    def __init__(self, cfg, keys, registry, app: Application | str = "kvs", sealing: SealingKey | None = None):
        super().__init__(cfg, keys, registry)
        self.app = make_app(app) if isinstance(app, str) else app
        self.sealing = sealing
        self.bodies: dict[int, dict[bytes, tuple[Request, ...]]] = defaultdict(dict)
        self.commits: dict[tuple[int, int, bytes], dict[int, Commit]] = defaultdict(dict)
        self.committed: dict[int, bytes] = {}
        self.last_exec = 0
        self.clients: dict[int, ClientRecord] = {}
        self.sealed_replies: dict[tuple[int, int], Reply] = {}
        self.chkpts: dict[int, tuple[bytes, bytes]] = {0: (digest(self._state()), self._state())}
        self.pending_fetch: tuple[int, bytes] | None = None
        self.executed_log: list[tuple[int, bytes]] = []
        self.evidence: list[dict] = []
        self._handlers.update({
            PrePrepare: self.on_preprepare,
            Commit: self.on_commit,
            RequestBatch: self.on_requests,
            Request: lambda r: self.on_requests(RequestBatch((r,))),
            NewView: self.on_newview,
            FetchState: self.on_fetch_state,
            StateBlob: self.on_state_blob,
            PersistAck: self.on_persist_ack,
        })

    def _state(self) -> bytes:
        return encode_state(self.app.snapshot(), self.clients)

    def _admissible(self, msg, fx: Effects) -> bool:
        if not self._verified(msg, fx):
            return False
        if msg.n <= self.low_watermark or msg.n <= self.last_exec:
            fx.note("stale_drop", **describe(msg))
            return False
        if not in_window(msg.n, self.low_watermark, self.cfg):
            fx.note("ignored", reason="outside window", **describe(msg))
            return False
        return True

    # (4): commit quorum -----------------------------------------------------

    def on_preprepare(self, pp: PrePrepare) -> Effects:
        fx = Effects()
        if self._admissible(pp, fx):
            self._log_body(pp)
            self._run(fx)
        return fx

    def _log_body(self, pp: PrePrepare) -> None:
        slot = self.bodies[pp.n]
        if pp.d not in slot and len(slot) < MAX_DIGESTS_PER_SLOT:
            slot[pp.d] = pp.batch

    def on_commit(self, cm: Commit) -> Effects:
        fx = Effects()
        if not self._admissible(cm, fx):
            return fx
        self.commits[(cm.v, cm.n, cm.d)].setdefault(cm.i, cm)
        if len(self.commits[(cm.v, cm.n, cm.d)]) < self.cfg.quorum:
            return fx
        known = self.committed.get(cm.n)
        if known is None:
            candidates = [c for key, group in self.commits.items() if key[1] == cm.n for c in group.values()]
            try:
                cert = assemble_certificate(CertKind.COMMIT_QUORUM, candidates, self.cfg)
            except InsufficientQuorum:
                return fx
            except ConflictingCertificates as exc:
                self._evidence(fx, "commit_conflict", n=cm.n, digests=[c.d.hex() for c in exc.certificates])
                cert = exc.certificates[0]
            self.committed[cm.n] = cert.d
            fx.note("committed", n=cm.n, d=cert.d.hex())
            self._run(fx)
        elif known != cm.d:
            self._evidence(fx, "commit_conflict", n=cm.n, digests=sorted([known.hex(), cm.d.hex()]))
        return fx

    def _evidence(self, fx: Effects, kind: str, **fields) -> None:
        self.evidence.append({"kind": kind, **fields})
        fx.note(kind, **fields)

    # (8): ordered execution -------------------------------------------------

    def _run(self, fx: Effects) -> None:
        while True:
            n = self.last_exec + 1
            d = self.committed.get(n)
            if d is None or d not in self.bodies.get(n, {}):
                return
            self._execute(n, d, self.bodies[n][d], fx)

    def _execute(self, n: int, d: bytes, batch: tuple[Request, ...], fx: Effects) -> None:
        for req in batch:
            self._execute_one(req, fx)
        for record in self.app.end_batch():
            blob = record.payload
            if self.sealing is not None:
                blob = self.sealing.seal(blob, b"persist" + _U64.pack(record.index))
            fx.persist.append((record.index, blob))
        self.last_exec = n
        self.executed_log.append((n, d))
        fx.note("executed", n=n, d=d.hex(), size=len(batch))
        if n % self.cfg.checkpoint_interval == 0:
            self._take_checkpoint(n, fx)

    def _execute_one(self, req: Request, fx: Effects) -> None:
        rec = self.clients.get(req.c)
        if rec is not None and req.t in rec.results:
            self._send_reply(req.c, req.t, fx)
            return
        if rec is not None and req.t <= rec.last_t - CLIENT_WINDOW:
            fx.note("too_old", c=req.c, t=req.t)
            return
        session = self.sessions.get(req.c)
        try:
            if session is None:
                raise Tampered("no session")
            op = open_request(session, req.op, req.t)
        except Tampered:
            # the sequence number is consumed but nothing is applied
            fx.note("noop", c=req.c, t=req.t)
            return
        result = self.app.apply(req.c, op)
        if rec is None:
            rec = self.clients[req.c] = ClientRecord()
        rec.results[req.t] = result
        rec.last_t = max(rec.last_t, req.t)
        rec.prune()
        self._send_reply(req.c, req.t, fx)

    def _send_reply(self, c: int, t: int, fx: Effects) -> None:
        reply = self.sealed_replies.get((c, t))
        if reply is None:
            session = self.sessions.get(c)
            if session is None:
                return
            result = self.clients[c].results[t]
            reply = Reply(self.view, t, c, self.replica, seal_reply(session, self.replica, t, result))
            reply = reply.with_auth(client_mac(session.mac_key, reply.body))
            self.sealed_replies[(c, t)] = reply
        fx.send(to_client(c), reply)

    def on_requests(self, batch: RequestBatch) -> Effects:
        """Retransmissions of already executed requests get the cached reply."""
        fx = Effects()
        for req in batch.requests:
            rec = self.clients.get(req.c)
            if rec is None or req.t not in rec.results:
                continue
            session = self.sessions.get(req.c)
            if session is None or len(req.auth) <= self.replica:
                continue
            if verify_client_mac(session.mac_key, req.body, req.auth[self.replica]):
                self._send_reply(req.c, req.t, fx)
        return fx

    def on_persist_ack(self, ack: PersistAck) -> Effects:
        acknowledge = getattr(self.app, "acknowledge", None)
        if acknowledge is not None:
            acknowledge(ack.indices)
        return Effects()

    # checkpoints and state transfer ---------------------------------------

    def _take_checkpoint(self, n: int, fx: Effects) -> None:
        state = self._state()
        d = digest(state)
        self.chkpts[n] = (d, state)
        ck = self._sign(Checkpoint(self.view, n, d, self.replica))
        self._log_checkpoint(ck)
        fx.broadcast(ck)
        fx.note("checkpoint", n=n, d=d.hex())
        self._try_stable(n, fx)

    def on_checkpoint_cert(self, members) -> Effects:
        fx = super().on_checkpoint_cert(members)
        if not fx:
            return fx
        n, d = members[0].n, members[0].d
        own = self.chkpts.get(n)
        if own is not None and own[0] != d:
            self._evidence(fx, "checkpoint_diverged", n=n)
        if self.last_exec < n or (own is not None and own[0] != d):
            self.pending_fetch = (n, d)
            fx.broadcast(self._sign(FetchState(n, d, self.replica)), local=False)
            fx.note("fetch_state", n=n)
        return fx

    def collect_garbage(self, n: int) -> None:
        for k in [k for k in self.bodies if k <= n]:
            del self.bodies[k]
        for k in [k for k in self.commits if k[1] <= n]:
            del self.commits[k]
        for k in [k for k in self.committed if k <= n]:
            del self.committed[k]
        for k in [k for k in self.chkpts if k < n]:
            del self.chkpts[k]
        self.executed_log = [e for e in self.executed_log if e[0] > n]
        live = {(c, t) for c, rec in self.clients.items() for t in rec.results}
        for key in [k for k in self.sealed_replies if k not in live]:
            del self.sealed_replies[key]

    def on_fetch_state(self, fs: FetchState) -> Effects:
        fx = Effects()
        if not self._verified(fs, fx) or fs.i == self.replica:
            return fx
        held = self.chkpts.get(fs.n)
        if held is None or held[0] != fs.d or self.sealing is None:
            fx.note("fetch_unanswered", n=fs.n, i=fs.i)
            return fx
        blob = self.sealing.seal(held[1], b"state" + _U64.pack(fs.n) + fs.d)
        fx.send(to_replica(fs.i), self._sign(StateBlob(fs.n, fs.d, blob, self.replica)))
        return fx

    def on_state_blob(self, sb: StateBlob) -> Effects:
        fx = Effects()
        if not self._verified(sb, fx):
            return fx
        if self.pending_fetch != (sb.n, sb.d) or self.sealing is None:
            fx.note("ignored", reason="unsolicited state", **describe(sb))
            return fx
        try:
            state = self.sealing.open(sb.blob, b"state" + _U64.pack(sb.n) + sb.d)
            if digest(state) != sb.d:
                raise Tampered("digest mismatch")
            app_blob, clients = decode_state(state)
            self.app.restore(app_blob)
        except (Tampered, ValueError) as exc:
            self._evidence(fx, "bad_state_blob", n=sb.n, i=sb.i, error=str(exc))
            fx.broadcast(self._sign(FetchState(sb.n, sb.d, self.replica)), local=False)
            return fx
        before = {c: rec.last_t for c, rec in self.clients.items()}
        self.clients = clients
        self.sealed_replies = {}
        self.last_exec = sb.n
        self.chkpts[sb.n] = (sb.d, state)
        self.pending_fetch = None
        for k in [k for k in self.bodies if k <= sb.n]:
            del self.bodies[k]
        fx.note("installed", n=sb.n, d=sb.d.hex(), source=sb.i)
        # results this enclave skipped over still owe their clients a reply
        for c, rec in sorted(clients.items()):
            for t in sorted(rec.results):
                if t > before.get(c, 0):
                    self._send_reply(c, t, fx)
        self._run(fx)
        return fx

    # NewView synchronisation -----------------------------------------------

    def on_newview(self, nv: NewView) -> Effects:
        fx = Effects()
        if nv.v < self.view:
            fx.note("stale_drop", **describe(nv))
            return fx
        if not newview_proof_valid(nv, self.cfg, self.registry):
            self._evidence(fx, "newview_invalid", v=nv.v)
            return fx
        self.view = nv.v
        self._apply_newview_checkpoint(nv, fx)
        for pp in nv.preprepares:
            if pp.n > max(self.last_exec, self.low_watermark) and in_window(pp.n, self.low_watermark, self.cfg):
                self._log_body(pp)
        fx.note("newview_synced", v=nv.v)
        self._run(fx)
        return fx

    # introspection ----------------------------------------------------------

    def log_seqnos(self) -> list[int]:
        out = super().log_seqnos()
        out += [n for n, slot in self.bodies.items() if slot]
        out += [k[1] for k, g in self.commits.items() if g] + list(self.committed)
        return out

    def logged_messages(self) -> list:
        out = super().logged_messages()
        for g in self.commits.values():
            out += list(g.values())
        return out

    def state_digest(self) -> bytes:
        return digest(self._state())
