"""The untrusted broker: routing, batching, timers and storage for one replica.

The broker is trusted for nothing.  It decodes frames, decides which enclave
sees what, and writes whatever enclaves hand it to the network and to disk.
:class:`Misbehavior` rules let a scenario make it act adversarially.
"""
from __future__ import annotations

import random
import struct
from collections import Counter, OrderedDict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from .compartments.base import ALL, Effects, PersistAck, RequestBatch, ViewChangeTrigger
from .config import CompartmentKind, Config
from .messages import (
    Checkpoint, Commit, FetchState, MalformedMessage, Message, NewView, PrePrepare, Prepare, Provision,
    Reply, Request, StateBlob, ViewChange, decode, describe,
)

PREP, CONF, EXEC = CompartmentKind.PREPARATION, CompartmentKind.CONFIRMATION, CompartmentKind.EXECUTION

ROUTES: dict[type, tuple[CompartmentKind, ...]] = {
    Request: (PREP,),
    PrePrepare: (PREP, CONF, EXEC),
    Prepare: (CONF,),
    Commit: (EXEC,),
    Checkpoint: (PREP, CONF, EXEC),
    ViewChange: (PREP,),
    NewView: (PREP, CONF, EXEC),
    FetchState: (EXEC,),
    StateBlob: (EXEC,),
}

SEEN_LIMIT = 100_000


class Clock(Protocol):
    def time(self) -> int: ...

    def call_later(self, delay: int, fn: Callable[[], None]) -> Any: ...


def _type_name(event) -> str:
    return "Request" if isinstance(event, RequestBatch) else type(event).__name__


# ----------------------------------------------------------- misbehaviour


@dataclass
class Rule:
    """One adversarial broker behaviour.

    ``where`` is ``inbound`` (frames from the network), ``to_enclave`` (ecalls)
    or ``outbound`` (frames leaving the replica).  Empty selectors match
    everything.
    """

    action: str
    where: str = "to_enclave"
    types: tuple[str, ...] = ()
    kinds: tuple[str, ...] = ()
    peers: tuple[int, ...] = ()
    views: tuple[int, ...] = ()
    prob: float = 1.0
    delay: int = 0
    start: int = 0
    end: int | None = None

    ACTIONS = ("drop", "delay", "duplicate", "reorder", "replay")

    def __post_init__(self) -> None:
        if self.action not in self.ACTIONS:
            raise ValueError(f"unknown broker action {self.action!r}")
        if self.where not in ("inbound", "to_enclave", "outbound"):
            raise ValueError(f"unknown rule position {self.where!r}")
        self.types = tuple(self.types)
        self.kinds = tuple(self.kinds)
        self.peers = tuple(self.peers)
        self.views = tuple(self.views)

    def matches(self, where: str, event, now: int, kind: CompartmentKind | None = None,
                peer: int | None = None) -> bool:
        if where != self.where or now < self.start or (self.end is not None and now >= self.end):
            return False
        if self.types and _type_name(event) not in self.types:
            return False
        if self.kinds and (kind is None or kind.short not in self.kinds):
            return False
        if self.peers and peer not in self.peers:
            return False
        if self.views:
            v = getattr(event, "v", getattr(event, "new_view", None))
            if v not in self.views:
                return False
        return True


@dataclass
class Misbehavior:
    rules: list[Rule] = field(default_factory=list)
    stop_timers: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.rng = random.Random(self.seed)

    def decide(self, where: str, event, now: int, kind=None, peer=None) -> list[int]:
        """Delivery delays for ``event``; an empty list means drop it."""
        for rule in self.rules:
            if not rule.matches(where, event, now, kind, peer):
                continue
            if rule.prob < 1.0 and self.rng.random() >= rule.prob:
                continue
            if rule.action == "drop":
                return []
            if rule.action == "delay":
                return [rule.delay]
            if rule.action == "duplicate":
                return [0, 0]
            if rule.action == "reorder":
                return [self.rng.randint(0, max(1, rule.delay))]
            if rule.action == "replay":
                return [0, max(1, rule.delay)]
        return [0]

    @property
    def active(self) -> bool:
        return bool(self.rules)


# ---------------------------------------------------------------- storage


class BlockStore:
    """Append-only store of sealed blobs: ``u64 index | u32 length | blob`` records."""

    _HDR = struct.Struct(">QI")

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[tuple[int, bytes]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()

    def append(self, index: int, blob: bytes) -> None:
        self.records.append((index, blob))
        if self.path is not None:
            with self.path.open("ab") as fh:
                fh.write(self._HDR.pack(index, len(blob)) + blob)

    @classmethod
    def read(cls, path: str | Path) -> list[tuple[int, bytes]]:
        data, out, pos = Path(path).read_bytes(), [], 0
        while pos < len(data):
            index, size = cls._HDR.unpack_from(data, pos)
            pos += cls._HDR.size
            out.append((index, data[pos:pos + size]))
            pos += size
        return out


# ----------------------------------------------------------------- broker


@dataclass
class BrokerStats:
    ecalls: Counter = field(default_factory=Counter)
    ocalls: int = 0
    malformed: int = 0
    backpressure: int = 0
    dropped_by_policy: int = 0
    triggers: int = 0
    # (compartment, message type, view) -> messages emitted
    sent: Counter = field(default_factory=Counter)


class Broker:
    def __init__(
        self,
        cfg: Config,
        replica: int,
        enclaves: dict[CompartmentKind, Any],
        clock: Clock,
        send: Callable[[Any, bytes], None],
        trace: Callable[[dict], None] | None = None,
        store: BlockStore | None = None,
        misbehavior: Misbehavior | None = None,
    ):
        self.cfg = cfg
        self.replica = replica
        self.enclaves = enclaves
        self.clock = clock
        self._send = send
        self.trace = trace
        self.store = store or BlockStore()
        self.misbehavior = misbehavior or Misbehavior()
        self.stats = BrokerStats()
        self.crashed = False
        self.queue: deque[tuple[CompartmentKind, Any]] = deque()
        self._pumping = False
        self._batch: list[Request] = []
        self._batch_timer = None
        self._seen: OrderedDict[tuple[int, int], bool] = OrderedDict()
        self._replied: OrderedDict[tuple[int, int], bool] = OrderedDict()
        self.req_timers: dict[tuple[int, int], Any] = {}
        self.view_hint = 0
        self._vc_timer = None
        self._vc_attempts = 0
        self._acks: list[int] = []
        self._ack_timer = None
        self.listeners: list[Callable[[CompartmentKind, str, dict], None]] = []

    def _now(self) -> int:
        return self.clock.time()

    def _record(self, kind: str, **fields) -> None:
        if self.trace is not None:
            self.trace({"t": self._now(), "replica": self.replica, "kind": kind, **fields})

    # inbound -------------------------------------------------------------

    def receive(self, src, data: bytes) -> None:
        if self.crashed:
            return
        try:
            msg = decode(data)
        except MalformedMessage as exc:
            self.stats.malformed += 1
            self._record("malformed", src=str(src), size=len(data), error=str(exc)[:80])
            return
        peer = src[1] if isinstance(src, tuple) and src[0] == "replica" else None
        for delay in self._plan("inbound", msg, peer=peer):
            self._later(delay, lambda m=msg: self.route(m, peer))

    def route(self, msg: Message, peer: int | None = None) -> None:
        if self.crashed:
            return
        if isinstance(msg, Request):
            self._on_request(msg, forwarded=peer is not None)
        elif isinstance(msg, Provision):
            try:
                self.deliver(CompartmentKind(msg.kind), msg)
            except ValueError:
                self._record("misrouted", **describe(msg))
        else:
            kinds = ROUTES.get(type(msg))
            if kinds is None:
                self._record("misrouted", **describe(msg))
                return
            for kind in kinds:
                self.deliver(kind, msg)

    def _plan(self, where: str, event, kind=None, peer=None) -> list[int]:
        if not self.misbehavior.active:
            return [0]
        plan = self.misbehavior.decide(where, event, self._now(), kind, peer)
        if not plan:
            self.stats.dropped_by_policy += 1
        return plan

    def _later(self, delay: int, fn: Callable[[], None]) -> None:
        if delay <= 0:
            fn()
        else:
            self.clock.call_later(delay, fn)

    def deliver(self, kind: CompartmentKind, event) -> None:
        """Queue an ecall into ``kind``; each enclave sees its events in FIFO order."""
        if kind not in self.enclaves:
            return
        for delay in self._plan("to_enclave", event, kind=kind):
            if delay <= 0:
                self.queue.append((kind, event))
                self._pump()
            else:
                self.clock.call_later(delay, lambda e=event: self._enqueue(kind, e))

    def _enqueue(self, kind, event) -> None:
        if self.crashed:
            return
        self.queue.append((kind, event))
        self._pump()

    def _pump(self) -> None:
        if self._pumping:
            return
        self._pumping = True
        try:
            while self.queue and not self.crashed:
                kind, event = self.queue.popleft()
                self.stats.ecalls[kind] += 1
                if self.trace is not None and not isinstance(event, (PersistAck, RequestBatch, ViewChangeTrigger)):
                    self._record("ecall", enclave=kind.short, **describe(event))
                fx = self.enclaves[kind].handle(event)
                self._apply(kind, fx)
        finally:
            self._pumping = False

    # effects --------------------------------------------------------------

    def _apply(self, kind: CompartmentKind, fx: Effects) -> None:
        for name, fields in fx.events:
            self._record("enclave", enclave=kind.short, event=name, **fields)
            self._observe(kind, name, fields)
            for listener in self.listeners:
                listener(kind, name, fields)
        if fx.backpressure:
            self.stats.backpressure += 1
        for dest, msg in fx.out:
            self.stats.ocalls += 1
            self.stats.sent[(kind.short, type(msg).__name__, getattr(msg, "v", getattr(msg, "new_view", -1)))] += 1
            if kind is CONF and isinstance(msg, ViewChange):
                self._on_viewchange_sent(msg.new_view)
            if kind is EXEC and isinstance(msg, Reply):
                self._on_reply(msg)
            if dest == ALL:
                for j in range(self.cfg.n):
                    if j != self.replica:
                        self._transmit(("replica", j), msg, fx.delay)
            else:
                self._transmit(dest, msg, fx.delay)
        for msg in fx.forward:
            for target in ROUTES.get(type(msg), ()):
                if target is not kind:
                    self.deliver(target, msg)
        for index, blob in fx.persist:
            self.stats.ocalls += 1
            self.store.append(index, blob)
            self._acks.append(index)
        if self._acks and self._ack_timer is None:
            self._ack_timer = self.clock.call_later(self.cfg.batch_timeout, self._flush_acks)

    def _transmit(self, dest, msg: Message, extra: int = 0) -> None:
        peer = dest[1] if dest[0] == "replica" else None
        for delay in self._plan("outbound", msg, peer=peer):
            self._later(delay + extra, lambda: self._send(dest, msg.wire))

    def _flush_acks(self) -> None:
        self._ack_timer = None
        if self._acks and not self.crashed:
            acks, self._acks = tuple(self._acks), []
            self.deliver(EXEC, PersistAck(acks))

    # requests and batching ----------------------------------------------------

    def _on_request(self, req: Request, forwarded: bool = False) -> None:
        key = req.key
        if forwarded and (key in self._seen or any(r.key == key for r in self._batch)):
            return
        if key not in self._replied and key not in self.req_timers:
            self.req_timers[key] = self._start_request_timer()
        self._batch.append(req)
        if len(self._batch) >= self.cfg.batch_max:
            self.flush_batch()
        elif self._batch_timer is None:
            self._batch_timer = self.clock.call_later(self.cfg.batch_timeout, self.flush_batch)

    def flush_batch(self) -> None:
        if self._batch_timer is not None:
            self._batch_timer.cancel()
            self._batch_timer = None
        if not self._batch or self.crashed:
            return
        batch, self._batch = self._batch, []
        retransmits = tuple(r for r in batch if r.key in self._seen)
        for r in batch:
            self._remember(self._seen, r.key)
        self.deliver(PREP, RequestBatch(tuple(batch)))
        if retransmits:
            self.deliver(EXEC, RequestBatch(retransmits))

    @staticmethod
    def _remember(table: OrderedDict, key) -> None:
        table[key] = True
        table.move_to_end(key)
        if len(table) > SEEN_LIMIT:
            table.popitem(last=False)

    def _on_reply(self, reply: Reply) -> None:
        key = (reply.c, reply.t)
        self._remember(self._replied, key)
        timer = self.req_timers.pop(key, None)
        if timer is not None:
            timer.cancel()

    # view-change timers ---------------------------------------------------------

    def _start_request_timer(self):
        return self.clock.call_later(self.cfg.request_timeout, self._request_timeout)

    def _request_timeout(self) -> None:
        if self.crashed or self.misbehavior.stop_timers:
            return
        if self._vc_timer is not None:
            return
        self._record("timeout", view=self.view_hint)
        self._trigger()

    def _trigger(self) -> None:
        self.stats.triggers += 1
        self.deliver(CONF, ViewChangeTrigger(self.view_hint))

    def _on_viewchange_sent(self, new_view: int) -> None:
        self.view_hint = max(self.view_hint, new_view)
        self._vc_attempts += 1
        if self._vc_timer is not None:
            self._vc_timer.cancel()
        delay = self.cfg.viewchange_timeout * (2 ** (self._vc_attempts - 1))
        self._vc_timer = self.clock.call_later(delay, self._viewchange_timeout)

    def _viewchange_timeout(self) -> None:
        self._vc_timer = None
        if self.crashed or self.misbehavior.stop_timers:
            return
        self._record("viewchange_timeout", view=self.view_hint)
        self._trigger()

    def _observe(self, kind: CompartmentKind, name: str, fields: dict) -> None:
        if kind is not CONF or name != "newview_synced":
            return
        v = fields["v"]
        if v < self.view_hint:
            return
        self.view_hint = v
        if self._vc_timer is not None:
            self._vc_timer.cancel()
            self._vc_timer = None
        self._vc_attempts = 0
        for key in list(self.req_timers):
            self.req_timers[key].cancel()
            self.req_timers[key] = self._start_request_timer()

    # harness helpers -----------------------------------------------------------

    def inject(self, kind: CompartmentKind, event) -> None:
        """Hand an arbitrary event to an enclave, as a hostile broker could."""
        self.deliver(kind, event)

    def crash(self) -> None:
        self.crashed = True
        self.queue.clear()
        for timer in self.req_timers.values():
            timer.cancel()
        self.req_timers.clear()
        for t in (self._vc_timer, self._batch_timer, self._ack_timer):
            if t is not None:
                t.cancel()

    @property
    def total_ecalls(self) -> int:
        return sum(self.stats.ecalls.values())
