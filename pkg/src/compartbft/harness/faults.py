"""Byzantine and crash behaviours, applied by wrapping a correct compartment."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from ..broker import Misbehavior, Rule
from ..compartments.base import ALL, Effects, ViewChangeTrigger, to_replica
from ..config import CompartmentKind, EnclaveId
from ..crypto import client_mac, seal_reply
from ..messages import Checkpoint, Commit, NewView, PrePrepare, Reply, Request, digest

PREP, CONF, EXEC = CompartmentKind.PREPARATION, CompartmentKind.CONFIRMATION, CompartmentKind.EXECUTION


class Behavior(str, enum.Enum):
    CRASH = "CRASH"
    MUTE = "MUTE"
    EQUIVOCATE = "EQUIVOCATE"
    AMNESIA = "AMNESIA"
    LIE_COMMIT = "LIE_COMMIT"
    LIE_REPLY = "LIE_REPLY"
    DELAY_ALL = "DELAY_ALL"
    FORGE_NEWVIEW = "FORGE_NEWVIEW"
    ACCEPT_ANY_NEWVIEW = "ACCEPT_ANY_NEWVIEW"
    CORRUPT_ENV = "CORRUPT_ENV"


ALLOWED_KINDS = {
    Behavior.EQUIVOCATE: {PREP},
    Behavior.FORGE_NEWVIEW: {PREP},
    Behavior.ACCEPT_ANY_NEWVIEW: {PREP},
    Behavior.AMNESIA: {PREP, CONF},
    Behavior.LIE_COMMIT: {CONF},
    Behavior.LIE_REPLY: {EXEC},
}

# a request no honest client ever sends; used to build bogus batches
_BOGUS = Request(b"forged", 0, 0)


@dataclass
class FaultSpec:
    enclave: EnclaveId
    behavior: Behavior
    at: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if isinstance(self.enclave, str):
            self.enclave = EnclaveId.parse(self.enclave)
        self.behavior = Behavior(self.behavior)
        allowed = ALLOWED_KINDS.get(self.behavior)
        if allowed is not None and self.enclave.kind not in allowed:
            raise ValueError(f"{self.behavior.value} does not apply to {self.enclave}")


def environment_rules(seed: int) -> Misbehavior:
    """The mildly hostile environment that comes with any compromised enclave."""
    return Misbehavior(
        rules=[Rule("duplicate", where="inbound", prob=0.05), Rule("reorder", where="inbound", prob=0.05, delay=3)],
        seed=seed,
    )


class FaultyEnclave:
    """Wraps a correct compartment and bends its outputs.

    Inputs still reach the wrapped state machine, so a byzantine enclave
    keeps protocol state and can lie consistently.
    """

    byzantine = True

    def __init__(self, inner, spec: FaultSpec, clock, cfg):
        self.inner = inner
        self.spec = spec
        self.clock = clock
        self.cfg = cfg
        self._events = 0
        if spec.behavior is Behavior.ACCEPT_ANY_NEWVIEW:
            inner.accepts_reissue = lambda nv: True

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def __repr__(self) -> str:
        return f"<{self.spec.behavior.value} {self.inner!r}>"

    @property
    def active(self) -> bool:
        return self.clock.time() >= self.spec.at

    def provision(self, msg):
        if self.active and self.spec.behavior is Behavior.CRASH:
            return None
        return self.inner.provision(msg)

    def handle(self, event) -> Effects:
        if not self.active:
            return self.inner.handle(event)
        b = self.spec.behavior
        if b is Behavior.CRASH:
            return Effects()
        if b is Behavior.AMNESIA:
            self._forget(event)
        fx = self.inner.handle(event)
        if b is Behavior.MUTE:
            muted = Effects()
            muted.events = fx.events
            return muted
        if b is Behavior.DELAY_ALL:
            fx.delay = int(self.spec.params.get("delay", 50))
        elif b is Behavior.EQUIVOCATE:
            fx.out = self._equivocate(fx.out)
        elif b is Behavior.LIE_COMMIT:
            fx.out = [(d, self._lie_commit(m)) for d, m in fx.out]
            fx.forward = [self._lie_commit(m) for m in fx.forward]
            if isinstance(event, PrePrepare):
                # commit straight away, no prepare certificate behind it
                fx.broadcast(self.inner._sign(Commit(event.v, event.n, event.d, self.inner.replica)))
        elif b is Behavior.LIE_REPLY:
            fx.out = [(d, self._lie_exec(m)) for d, m in fx.out]
            fx.forward = [self._lie_exec(m) for m in fx.forward]
        elif b is Behavior.FORGE_NEWVIEW:
            fx.out, fx.forward = self._forge(fx.out, fx.forward)
        return fx

    # individual lies ---------------------------------------------------------

    def _forget(self, event) -> None:
        """Lose the input log every ``period`` events, and always before a view change."""
        self._events += 1
        period = int(self.spec.params.get("period", 20))
        if not (isinstance(event, ViewChangeTrigger) or self._events % period == 0):
            return
        inner = self.inner
        if inner.KIND is PREP:
            inner.preprepares.clear()
            inner.prepares.clear()
            inner.ordered.clear()
        else:
            inner.commits.clear()
            inner.proofs.clear()

    def _equivocate(self, out):
        result = []
        split = self.cfg.n // 2
        for dest, msg in out:
            if dest != ALL or not isinstance(msg, PrePrepare):
                result.append((dest, msg))
                continue
            other = () if msg.batch else (_BOGUS,)
            forged = self.inner._sign(PrePrepare(msg.v, msg.n, other))
            for j in range(self.cfg.n):
                if j != self.inner.replica:
                    result.append((to_replica(j), msg if j < split else forged))
        return result

    def _lie_commit(self, msg):
        if isinstance(msg, Commit):
            return self.inner._sign(Commit(msg.v, msg.n, digest(b"lie" + msg.d), msg.i))
        return msg

    def _lie_exec(self, msg):
        if isinstance(msg, Checkpoint):
            return self.inner._sign(Checkpoint(msg.v, msg.n, digest(b"lie" + msg.d), msg.i))
        if isinstance(msg, Reply):
            session = self.inner.sessions.get(msg.c)
            if session is None:
                return msg
            forged = Reply(msg.v, msg.t, msg.c, msg.i, seal_reply(session, msg.i, msg.t, b"GARBAGE"))
            return forged.with_auth(client_mac(session.mac_key, forged.body))
        return msg

    def _forge(self, out, forward):
        mode = self.spec.params.get("mode", "extra")
        targets = set(self.spec.params.get("targets", ()))
        new_out = []
        for dest, msg in out:
            if not isinstance(msg, NewView):
                new_out.append((dest, msg))
                continue
            forged = self._forged_newview(msg, mode)
            if mode == "replace":
                new_out.append((dest, forged))
                continue
            for j in range(self.cfg.n):
                if j != self.inner.replica:
                    new_out.append((to_replica(j), forged if j in targets else msg))
        if mode == "replace":
            forward = [self._forged_newview(m, mode) if isinstance(m, NewView) else m for m in forward]
        return new_out, forward

    def _forged_newview(self, nv: NewView, mode: str) -> NewView:
        sign = self.inner._sign
        if mode == "replace":
            pps = tuple(sign(PrePrepare(nv.v, pp.n, ())) for pp in nv.preprepares)
        else:
            top = max([nv.ckpt_n] + [pp.n for pp in nv.preprepares])
            pps = nv.preprepares + (sign(PrePrepare(nv.v, top + 1, (_BOGUS,))),)
        return sign(NewView(nv.v, nv.viewchanges, pps, nv.ckpt_cert))


def wrap(enclave, spec: FaultSpec | None, clock, cfg):
    if spec is None or spec.behavior is Behavior.CORRUPT_ENV:
        return enclave
    return FaultyEnclave(enclave, spec, clock, cfg)
