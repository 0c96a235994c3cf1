"""Client library: attestation, request submission and reply voting."""
from __future__ import annotations

import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from . import apps
from .config import CompartmentKind, Config, EnclaveId
from .crypto import (
    AttestationRejected, ClientKey, ClientSession, KeyRegistry, Tampered, WrongKind, attest_stub,
    client_mac, open_reply, provision_message, derive, seal_request, verify_client_mac,
)
from .messages import MalformedMessage, ProvisionAck, Reply, Request, decode

CANARY = b"@CNRY:"


class NoExecutionSession(RuntimeError):
    """Every Execution enclave refused attestation, so no reply could ever be read."""


@dataclass
class Operation:
    """One entry of the client-observed history."""

    client: int
    t: int
    op: bytes
    invoke: int
    response: int | None = None
    result: bytes | None = None

    @property
    def complete(self) -> bool:
        return self.response is not None


@dataclass
class History:
    ops: list[Operation] = field(default_factory=list)

    def add(self, op: Operation) -> None:
        self.ops.append(op)

    def completed(self) -> list[Operation]:
        return [o for o in self.ops if o.complete]

    def pending(self) -> list[Operation]:
        return [o for o in self.ops if not o.complete]


class Workload:
    """Seeded key-value workload whose written values carry a canary marker."""

    def __init__(self, seed: int = 0, keys: int = 8, put_ratio: float = 0.5, delete_ratio: float = 0.1,
                 value_size: int = 16, canary: bytes = CANARY):
        self.rng = random.Random(seed)
        self.keys = [f"k{i}".encode() for i in range(keys)]
        self.put_ratio = put_ratio
        self.delete_ratio = delete_ratio
        self.value_size = value_size
        self.canary = canary
        self.count = 0

    def next_op(self) -> bytes:
        self.count += 1
        key = self.rng.choice(self.keys)
        roll = self.rng.random()
        if roll < self.put_ratio:
            pad = max(0, self.value_size - len(self.canary) - 8)
            value = self.canary + b"%08d" % self.count + bytes(self.rng.randrange(97, 123) for _ in range(pad))
            return apps.put(key, value)
        if roll < self.put_ratio + self.delete_ratio:
            return apps.delete(key)
        return apps.get(key)


@dataclass
class _Pending:
    op: Operation
    request: Request
    timer: Any = None
    attempts: int = 0
    votes: dict[int, bytes] = field(default_factory=dict)
    on_done: Callable[[Operation], None] | None = None


class Client:
    """Sends every request to all replicas and accepts f+1 matching results."""

    def __init__(
        self,
        cfg: Config,
        client_id: int,
        client_key: ClientKey,
        registry: KeyRegistry,
        send: Callable[[Any, bytes], None],
        clock,
        seed: int | bytes | None = None,
        encrypt: bool = True,
        retransmit: int | None = None,
        history: History | None = None,
    ):
        self.cfg = cfg
        self.id = client_id
        self.key = client_key
        self.registry = registry
        self._send = send
        self.clock = clock
        self.session = ClientSession.create(client_id, cfg.n, seed, encrypt)
        self.retransmit = retransmit or max(1, cfg.request_timeout // 2)
        self.history = history if history is not None else History()
        self.t = 0
        self.pending: dict[int, _Pending] = {}
        self.attested: dict[tuple[int, int], bool] = {}
        self.retransmissions = 0
        self.rejected_replies = 0

    # attestation --------------------------------------------------------------

    def attest(self, enclaves: Iterable) -> dict:
        """In-process attestation against Preparation and Execution enclaves.

        Enclaves that refuse are skipped; having no Execution session at all
        is fatal.
        """
        sessions = {}
        for enclave in enclaves:
            try:
                sessions[enclave.id] = attest_stub(self.session, self.key, self.registry, enclave)
                self.attested[(enclave.id.replica, int(enclave.id.kind))] = True
            except (AttestationRejected, WrongKind):
                self.attested[(enclave.id.replica, int(enclave.id.kind))] = False
        self._require_execution()
        return sessions

    def provision_all(self) -> None:
        """Network variant: send Provision messages and collect acks in :meth:`receive`."""
        for eid in self.registry.enclave_ids():
            if eid.kind == CompartmentKind.CONFIRMATION:
                continue
            eph = derive(self.session.s_enc, "eph", eid.replica, int(eid.kind))
            prov = provision_message(self.session, self.key, self.registry, eid, eph_seed=eph)
            self._send(("replica", eid.replica), prov.wire)

    def _require_execution(self) -> None:
        if not any(ok for (r, k), ok in self.attested.items() if k == int(CompartmentKind.EXECUTION)):
            raise NoExecutionSession(f"client {self.id} has no attested Execution enclave")

    # requests ----------------------------------------------------------------

    def submit(self, plaintext: bytes, on_done: Callable[[Operation], None] | None = None) -> int:
        self.t += 1
        t = self.t
        req = Request(seal_request(self.session, plaintext, t), t, self.id)
        body = req.body
        req = req.with_auth(tuple(client_mac(self.session.mac_keys[r], body) for r in range(self.cfg.n)))
        op = Operation(self.id, t, plaintext, self.clock.time())
        self.history.add(op)
        pending = _Pending(op, req, on_done=on_done)
        self.pending[t] = pending
        self._broadcast(pending)
        return t

    def _broadcast(self, pending: _Pending) -> None:
        data = pending.request.wire
        for r in range(self.cfg.n):
            self._send(("replica", r), data)
        delay = min(self.retransmit * (2 ** pending.attempts), self.retransmit * 16)
        pending.timer = self.clock.call_later(delay, lambda t=pending.op.t: self._on_timeout(t))

    def _on_timeout(self, t: int) -> None:
        pending = self.pending.get(t)
        if pending is None:
            return
        pending.attempts += 1
        self.retransmissions += 1
        self._broadcast(pending)

    def receive(self, src, data: bytes) -> None:
        try:
            msg = decode(data)
        except MalformedMessage:
            self.rejected_replies += 1
            return
        if isinstance(msg, Reply):
            self._on_reply(msg)
        elif isinstance(msg, ProvisionAck):
            if msg.c == self.id and self.registry.verify(_ack_sender(msg), msg.body, msg.sig):
                self.attested[(msg.i, msg.kind)] = bool(msg.ok)

    def _on_reply(self, reply: Reply) -> None:
        pending = self.pending.get(reply.t)
        if pending is None or reply.c != self.id or not 0 <= reply.i < self.cfg.n:
            return
        if not verify_client_mac(self.session.mac_keys[reply.i], reply.body, reply.auth):
            self.rejected_replies += 1
            return
        try:
            result = open_reply(self.session, reply.i, reply.t, reply.result)
        except Tampered:
            self.rejected_replies += 1
            return
        pending.votes[reply.i] = result
        tally: dict[bytes, int] = defaultdict(int)
        for r in pending.votes.values():
            tally[r] += 1
        if tally[result] >= self.cfg.reply_quorum:
            self._complete(pending, result)

    def _complete(self, pending: _Pending, result: bytes) -> None:
        del self.pending[pending.op.t]
        if pending.timer is not None:
            pending.timer.cancel()
        pending.op.response = self.clock.time()
        pending.op.result = result
        if pending.on_done is not None:
            pending.on_done(pending.op)

    @property
    def outstanding(self) -> int:
        return len(self.pending)


def _ack_sender(ack: ProvisionAck) -> EnclaveId:
    return EnclaveId(ack.i, CompartmentKind(ack.kind))


class ClosedLoop:
    """Keeps ``outstanding`` requests in flight until ``total`` have completed."""

    def __init__(self, client: Client, workload: Workload, total: int, outstanding: int = 1,
                 on_complete: Callable[[Operation], None] | None = None):
        self.client = client
        self.workload = workload
        self.total = total
        self.outstanding = outstanding
        self.issued = 0
        self.completed = 0
        self.on_complete = on_complete

    def start(self) -> None:
        for _ in range(min(self.outstanding, self.total)):
            self._issue()

    def _issue(self) -> None:
        self.issued += 1
        self.client.submit(self.workload.next_op(), self._done)

    def _done(self, op: Operation) -> None:
        self.completed += 1
        if self.on_complete is not None:
            self.on_complete(op)
        if self.issued < self.total:
            self._issue()

    @property
    def finished(self) -> bool:
        return self.completed >= self.total
