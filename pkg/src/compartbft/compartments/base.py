"""Pieces shared by the three compartment state machines.

Every handler consumes one input event and returns an :class:`Effects`
record; that record is the whole enclave boundary.  Nothing else leaves an
enclave.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from ..certificates import (
    CertKind, ConflictingCertificates, InsufficientQuorum, assemble_certificate,
    checkpoint_cert_valid, validate_proof,
)
from ..config import CompartmentKind, Config, in_window, primary_of
from ..crypto import (
    AttestationRejected, EnclaveKeyPair, EnclaveSession, KeyRegistry, open_provision,
    sign_message, verify_message,
)
from ..messages import (
    Checkpoint, Message, NewView, PrePrepare, Provision, ProvisionAck, Request, ViewChange,
    batch_digest, describe,
)

ALL = "all"


def to_replica(j: int) -> tuple[str, int]:
    return ("replica", j)


def to_client(c: int) -> tuple[str, int]:
    return ("client", c)


@dataclass
class Effects:
    """Output of one enclave invocation.

    ``out`` goes to the untrusted out log (destination ``ALL`` means every
    other replica), ``forward`` is handed to sibling compartments on the same
    replica, ``persist`` holds sealed blobs for storage and ``events`` are
    trace-hook records.
    """

    out: list[tuple[Any, Message]] = field(default_factory=list)
    forward: list[Message] = field(default_factory=list)
    persist: list[tuple[int, bytes]] = field(default_factory=list)
    events: list[tuple[str, dict]] = field(default_factory=list)
    backpressure: bool = False
    delay: int = 0

    def broadcast(self, msg: Message, local: bool = True) -> None:
        self.out.append((ALL, msg))
        if local:
            self.forward.append(msg)

    def send(self, dest, msg: Message) -> None:
        self.out.append((dest, msg))

    def note(self, kind: str, **fields) -> None:
        self.events.append((kind, fields))

    def extend(self, other: "Effects") -> "Effects":
        self.out.extend(other.out)
        self.forward.extend(other.forward)
        self.persist.extend(other.persist)
        self.events.extend(other.events)
        self.backpressure |= other.backpressure
        return self

    def __bool__(self) -> bool:
        return bool(self.out or self.forward or self.persist or self.events or self.backpressure)


# internal (non-wire) events the broker can deliver


@dataclass(frozen=True)
class RequestBatch:
    requests: tuple[Request, ...]


@dataclass(frozen=True)
class ViewChangeTrigger:
    suspected_view: int


@dataclass(frozen=True)
class PersistAck:
    indices: tuple[int, ...]


# ------------------------------------------------------------- view change


def valid_viewchange(vc: ViewChange, cfg: Config, registry: KeyRegistry) -> bool:
    if not verify_message(registry, vc, cfg):
        return False
    if not checkpoint_cert_valid(vc.ckpt_n, vc.ckpt_cert, cfg, registry):
        return False
    seen = set()
    for proof in vc.prepare_certs:
        if proof.n in seen or proof.v >= vc.new_view:
            return False
        if not in_window(proof.n, vc.ckpt_n, cfg):
            return False
        if not validate_proof(proof, cfg, registry):
            return False
        seen.add(proof.n)
    return True


def newview_reissue(viewchanges: Iterable[ViewChange]) -> tuple[int, list[tuple[int, tuple[Request, ...]]]]:
    """Compute the PrePrepare payloads a NewView must carry.

    Returns the starting checkpoint and ``(n, batch)`` for every sequence
    between it and the highest prepared sequence: the batch of the
    highest-view prepare certificate, or the null batch for gaps.
    """
    vcs = list(viewchanges)
    min_s = max((vc.ckpt_n for vc in vcs), default=0)
    best: dict[int, tuple[int, bytes, tuple]] = {}
    for vc in vcs:
        for proof in vc.prepare_certs:
            if proof.n <= min_s:
                continue
            cand = (proof.v, proof.d, proof.preprepare.batch)
            cur = best.get(proof.n)
            if cur is None or cand[:2] > cur[:2]:
                best[proof.n] = cand
    max_s = max(best, default=min_s)
    return min_s, [(n, best[n][2] if n in best else ()) for n in range(min_s + 1, max_s + 1)]


def newview_proof_valid(nv: NewView, cfg: Config, registry: KeyRegistry) -> bool:
    """Checks shared by all compartments (signatures, quorum, checkpoint).

    The re-issued PrePrepares are only signature-checked here; recomputing
    them is the Preparation compartment's job.
    """
    if not verify_message(registry, nv, cfg):
        return False
    senders = set()
    for vc in nv.viewchanges:
        if vc.new_view != nv.v or vc.i in senders or not valid_viewchange(vc, cfg, registry):
            return False
        senders.add(vc.i)
    if len(senders) < cfg.quorum:
        return False
    max_ckpt = max(vc.ckpt_n for vc in nv.viewchanges)
    if nv.ckpt_n != max_ckpt or not checkpoint_cert_valid(max_ckpt, nv.ckpt_cert, cfg, registry):
        return False
    for pp in nv.preprepares:
        if pp.v != nv.v or not verify_message(registry, pp, cfg):
            return False
    return True


def newview_matches(nv: NewView) -> bool:
    min_s, expected = newview_reissue(nv.viewchanges)
    got = [(pp.n, pp.d) for pp in nv.preprepares]
    return got == [(n, batch_digest(batch)) for n, batch in expected]


# -------------------------------------------------------------- base class


MAX_CHECKPOINTS_PER_SENDER = 8


class Compartment:
    KIND: CompartmentKind

    def __init__(self, cfg: Config, keys: EnclaveKeyPair, registry: KeyRegistry):
        if keys.id.kind != self.KIND:
            raise ValueError(f"{type(self).__name__} needs a {self.KIND.name} key pair")
        self.cfg = cfg
        self.keys = keys
        self.registry = registry
        self.id = keys.id
        self.replica = keys.id.replica
        self.view = 0
        self.low_watermark = 0
        self.stable_ckpt_cert: tuple[Checkpoint, ...] = ()
        self.checkpoints: dict[int, dict[int, Checkpoint]] = defaultdict(dict)
        self.sessions: dict[int, EnclaveSession] = {}
        self.reject_attestation = False
        self._handlers: dict[type, Callable[[Any], Effects]] = {
            Checkpoint: self.on_checkpoint,
            Provision: self._on_provision,
        }

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.id} view={self.view} low={self.low_watermark}>"

    # dispatch ------------------------------------------------------------

    def handle(self, event) -> Effects:
        handler = self._handlers.get(type(event))
        if handler is None:
            fx = Effects()
            fx.note("unhandled", type=type(event).__name__)
            return fx
        return handler(event)

    def _verified(self, msg: Message, fx: Effects) -> bool:
        if verify_message(self.registry, msg, self.cfg):
            return True
        fx.note("bad_signature", **describe(msg))
        return False

    def _sign(self, msg):
        return sign_message(self.keys, msg)

    def is_primary(self, view: int | None = None) -> bool:
        return primary_of(self.view if view is None else view, self.cfg) == self.replica

    # attestation stub ------------------------------------------------------

    def provision(self, msg: Provision) -> ProvisionAck | None:
        if self.KIND == CompartmentKind.CONFIRMATION:
            return None
        ok = 0
        if not self.reject_attestation:
            try:
                self.sessions[msg.c] = open_provision(self.keys, self.registry, msg)
                ok = 1
            except AttestationRejected:
                ok = 0
        return self._sign(ProvisionAck(msg.c, int(self.KIND), self.replica, ok))

    def _on_provision(self, msg: Provision) -> Effects:
        fx = Effects()
        ack = self.provision(msg)
        if ack is not None:
            fx.send(to_client(msg.c), ack)
        return fx

    # checkpoints and garbage collection ----------------------------------

    def on_checkpoint(self, ck: Checkpoint) -> Effects:
        fx = Effects()
        if not self._verified(ck, fx):
            return fx
        if ck.n <= self.low_watermark:
            fx.note("stale_drop", **describe(ck))
            return fx
        if ck.n % self.cfg.checkpoint_interval:
            fx.note("bad_checkpoint", **describe(ck))
            return fx
        self._log_checkpoint(ck)
        self._try_stable(ck.n, fx)
        return fx

    def _log_checkpoint(self, ck: Checkpoint) -> None:
        slot = self.checkpoints[ck.n]
        if ck.i in slot:
            return
        mine = [n for n, s in self.checkpoints.items() if ck.i in s]
        if len(mine) >= MAX_CHECKPOINTS_PER_SENDER:
            # bound what a single sender can make us hold
            del self.checkpoints[max(mine)][ck.i]
        slot[ck.i] = ck

    def _try_stable(self, n: int, fx: Effects) -> None:
        try:
            cert = assemble_certificate(CertKind.CHECKPOINT_CERT, self.checkpoints[n].values(), self.cfg)
        except InsufficientQuorum:
            return
        except ConflictingCertificates as exc:
            fx.note("checkpoint_conflict", n=n, digests=[c.d.hex()[:16] for c in exc.certificates])
            cert = exc.certificates[0]
        fx.extend(self.on_checkpoint_cert(cert.members))

    def on_checkpoint_cert(self, members: tuple[Checkpoint, ...]) -> Effects:
        fx = Effects()
        n = members[0].n
        if n <= self.low_watermark:
            return fx
        self.low_watermark = n
        self.stable_ckpt_cert = tuple(members)
        for k in [k for k in self.checkpoints if k <= n]:
            del self.checkpoints[k]
        self.collect_garbage(n)
        fx.note("stable", n=n, d=members[0].d.hex()[:16])
        return fx

    def collect_garbage(self, n: int) -> None:
        raise NotImplementedError

    # introspection used by checkers --------------------------------------

    def log_seqnos(self) -> list[int]:
        """Every sequence number that still has an entry in this enclave's logs."""
        return [n for n, slot in self.checkpoints.items() if slot]

    def logged_messages(self) -> list[Message]:
        return [ck for slot in self.checkpoints.values() for ck in slot.values()]

    def _apply_newview_checkpoint(self, nv: NewView, fx: Effects) -> None:
        if nv.ckpt_n > self.low_watermark:
            fx.extend(self.on_checkpoint_cert(nv.ckpt_cert))
        elif nv.ckpt_n:
            fx.note("newview_checkpoint_ignored", v=nv.v, n=nv.ckpt_n)
