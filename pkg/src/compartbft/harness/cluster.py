"""In-process cluster on the simulated network."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable

from ..broker import BlockStore, Broker, Misbehavior
from ..client import Client, History
from ..compartments import Confirmation, Execution, Preparation
from ..config import CompartmentKind, Config, EnclaveId
from ..crypto import ClusterKeys, SealingKey, derive
from ..transport.simnet import LinkPolicy, Scheduler, SimNetwork
from .faults import FaultSpec, FaultyEnclave, wrap

PREP, CONF, EXEC = CompartmentKind.PREPARATION, CompartmentKind.CONFIRMATION, CompartmentKind.EXECUTION


@dataclass
class ExecRecord:
    """What one Execution enclave reported doing, independent of trace level."""

    executed: dict[int, str] = field(default_factory=dict)
    installed: dict[int, str] = field(default_factory=dict)
    checkpoints: dict[int, str] = field(default_factory=dict)


class SimCluster:
    def __init__(
        self,
        cfg: Config,
        clients: int = 1,
        seed: int = 0,
        app: str = "kvs",
        link: LinkPolicy | None = None,
        liveness: bool = True,
        trace: Callable[[dict], None] | None = None,
        encrypt: bool = True,
        faults: list[FaultSpec] = (),
        misbehavior: dict[int, Misbehavior] | None = None,
        reject_attestation: set[EnclaveId] = frozenset(),
        store_dir=None,
        client_retransmit: int | None = None,
    ):
        self.cfg = cfg
        self.seed = seed
        self.scheduler = Scheduler()
        self.net = SimNetwork(self.scheduler, seed=seed, default=link or LinkPolicy(), liveness=liveness)
        self.keys = ClusterKeys.generate(cfg, clients=range(clients), seed=seed)
        self.registry = self.keys.registry()
        self.trace = trace
        self.history = History()
        self.fault_specs = {spec.enclave: spec for spec in faults}
        self.enclaves: dict[EnclaveId, object] = {}
        self.brokers: list[Broker] = []
        self.records: dict[int, ExecRecord] = defaultdict(ExecRecord)
        misbehavior = misbehavior or {}
        sealing = SealingKey(self.keys.exec_sealing, b"exec")
        for r in range(cfg.n):
            comps = {
                PREP: Preparation(cfg, self.keys.enclaves[EnclaveId(r, PREP)], self.registry),
                CONF: Confirmation(cfg, self.keys.enclaves[EnclaveId(r, CONF)], self.registry),
                EXEC: Execution(cfg, self.keys.enclaves[EnclaveId(r, EXEC)], self.registry, app, sealing),
            }
            for kind, comp in list(comps.items()):
                comp.reject_attestation = comp.id in reject_attestation
                comps[kind] = wrap(comp, self.fault_specs.get(comp.id), self.scheduler, cfg)
                self.enclaves[comp.id] = comps[kind]
            store = BlockStore(f"{store_dir}/replica{r}.blocks" if store_dir else None)
            broker = Broker(cfg, r, comps, self.scheduler,
                            send=lambda dest, data, r=r: self.net.send(("replica", r), dest, data),
                            trace=trace, store=store, misbehavior=misbehavior.get(r))
            broker.listeners.append(lambda kind, name, fields, r=r: self._listen(r, kind, name, fields))
            self.net.register(("replica", r), broker.receive)
            self.brokers.append(broker)
        self.clients: list[Client] = []
        for c in range(clients):
            client = Client(cfg, c, self.keys.clients[c], self.registry,
                            send=lambda dest, data, c=c: self.net.send(("client", c), dest, data),
                            clock=self.scheduler, seed=derive(seed, "client", c), encrypt=encrypt,
                            retransmit=client_retransmit, history=self.history)
            self.net.register(("client", c), client.receive)
            self.clients.append(client)
        for client in self.clients:
            client.attest([e for eid, e in sorted(self.enclaves.items()) if eid.kind != CONF])

    def _listen(self, r: int, kind: CompartmentKind, name: str, fields: dict) -> None:
        if kind is not EXEC:
            return
        rec = self.records[r]
        if name == "executed":
            rec.executed[fields["n"]] = fields["d"]
        elif name == "installed":
            rec.installed[fields["n"]] = fields["d"]
        elif name == "checkpoint":
            rec.checkpoints[fields["n"]] = fields["d"]

    # topology helpers ---------------------------------------------------------

    def enclave(self, replica: int, kind: CompartmentKind):
        return self.enclaves[EnclaveId(replica, kind)]

    def is_faulty(self, eid: EnclaveId) -> bool:
        return isinstance(self.enclaves[eid], FaultyEnclave)

    def correct_replicas(self) -> list[int]:
        """Replicas with no faulty enclave and a live broker."""
        out = []
        for r in range(self.cfg.n):
            if self.brokers[r].crashed:
                continue
            if any(self.is_faulty(EnclaveId(r, k)) for k in CompartmentKind):
                continue
            out.append(r)
        return out

    def correct_enclaves(self, kind: CompartmentKind) -> list:
        return [self.enclave(r, kind) for r in self.correct_replicas()]

    def crash_replica(self, r: int) -> None:
        self.brokers[r].crash()
        self.net.down.add(("replica", r))
        if self.trace is not None:
            self.trace({"t": self.scheduler.now, "replica": r, "kind": "fault", "event": "crash"})

    # running ------------------------------------------------------------------

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> int:
        return self.scheduler.run(until=until, stop=stop)

    @property
    def now(self) -> int:
        return self.scheduler.now

    def total_ecalls(self) -> int:
        return sum(b.total_ecalls for b in self.brokers)
