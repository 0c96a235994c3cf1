"""Multi-process deployment over TCP: one process per replica, clients in their own processes.

Key material is derived from a shared ``key_seed`` so every process can
bootstrap the same registry without a key-distribution step.  That is a
stand-in for real provisioning and only suitable for testing.
"""
from __future__ import annotations

import asyncio
import dataclasses
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .broker import Broker
from .client import Client, ClosedLoop, Workload
from .compartments import Confirmation, Execution, Preparation
from .config import CompartmentKind, Config, EnclaveId
from .crypto import ClusterKeys, SealingKey, derive
from .transport.tcp import AsyncClock, TcpTransport, parse_address

log = logging.getLogger(__name__)

PREP, CONF, EXEC = CompartmentKind.PREPARATION, CompartmentKind.CONFIRMATION, CompartmentKind.EXECUTION


@dataclass
class DeployConfig:
    cluster: Config = field(default_factory=Config)
    replicas: list[str] = field(default_factory=lambda: [f"127.0.0.1:{7000 + i}" for i in range(4)])
    clients: int = 1
    key_seed: int = 0
    app: str = "kvs"

    def __post_init__(self) -> None:
        if len(self.replicas) != self.cluster.n:
            raise ValueError(f"{len(self.replicas)} replica addresses for n={self.cluster.n}")

    @property
    def addresses(self) -> dict[int, tuple[str, int]]:
        return {i: parse_address(a) for i, a in enumerate(self.replicas)}

    def keys(self) -> ClusterKeys:
        return ClusterKeys.generate(self.cluster, clients=range(self.clients), seed=self.key_seed)

    @classmethod
    def from_dict(cls, data: dict) -> "DeployConfig":
        data = dict(data or {})
        cluster = dict(data.pop("cluster", {}))
        f = cluster.pop("f", 1)
        cfg = Config.for_faults(f, **cluster)
        if "replicas" not in data:
            data["replicas"] = [f"127.0.0.1:{7000 + i}" for i in range(cfg.n)]
        return cls(cluster=cfg, **data)

    @classmethod
    def load(cls, path: str | Path | None) -> "DeployConfig":
        if path is None:
            return cls()
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def dump(self) -> str:
        cluster = dataclasses.asdict(self.cluster)
        cluster.pop("n")
        return yaml.safe_dump({"cluster": cluster, "replicas": self.replicas, "clients": self.clients,
                               "key_seed": self.key_seed, "app": self.app}, sort_keys=False)


def build_replica(dc: DeployConfig, replica: int, keys: ClusterKeys, clock, send, trace=None) -> Broker:
    """A broker with its three compartments, ready to receive frames."""
    cfg = dc.cluster
    registry = keys.registry()
    sealing = SealingKey(keys.exec_sealing, b"exec")
    comps = {
        PREP: Preparation(cfg, keys.enclaves[EnclaveId(replica, PREP)], registry),
        CONF: Confirmation(cfg, keys.enclaves[EnclaveId(replica, CONF)], registry),
        EXEC: Execution(cfg, keys.enclaves[EnclaveId(replica, EXEC)], registry, dc.app, sealing),
    }
    return Broker(cfg, replica, comps, clock, send=send, trace=trace)


async def serve_replica(dc: DeployConfig, replica: int, duration: float | None = None) -> Broker:
    clock = AsyncClock(asyncio.get_running_loop())
    holder: dict[str, Broker] = {}
    transport = TcpTransport(("replica", replica), dc.addresses, lambda src, data: holder["b"].receive(src, data))
    broker = build_replica(dc, replica, dc.keys(), clock, transport.send)
    holder["b"] = broker
    await transport.start()
    log.info("replica %d listening on %s", replica, dc.replicas[replica])
    try:
        if duration is None:
            await asyncio.Event().wait()
        else:
            await asyncio.sleep(duration)
    finally:
        await transport.close()
    return broker


@dataclass
class LoadSummary:
    completed: int
    seconds: float
    latencies_ms: list[float]

    @property
    def throughput(self) -> float:
        return self.completed / self.seconds if self.seconds else 0.0

    def lines(self) -> list[str]:
        lat = sorted(self.latencies_ms) or [0.0]
        p99 = lat[min(len(lat) - 1, int(0.99 * len(lat)))]
        return [f"completed  {self.completed}", f"seconds    {self.seconds:.3f}",
                f"throughput {self.throughput:.1f} ops/s",
                f"latency    mean {statistics.fmean(lat):.2f} ms  p99 {p99:.2f} ms"]


async def drive_client(dc: DeployConfig, client_id: int, ops: int, outstanding: int, seed: int = 0,
                       timeout: float = 60.0) -> LoadSummary:
    loop = asyncio.get_running_loop()
    clock = AsyncClock(loop)
    keys = dc.keys()
    holder: dict[str, Client] = {}
    transport = TcpTransport(("client", client_id), dc.addresses, lambda src, data: holder["c"].receive(src, data))
    client = Client(dc.cluster, client_id, keys.clients[client_id], keys.registry(), send=transport.send,
                    clock=clock, seed=derive(seed, "client", client_id))
    holder["c"] = client
    await transport.start()
    client.provision_all()
    deadline = loop.time() + timeout
    attest_by = loop.time() + min(timeout, 5.0)
    wanted = 2 * dc.cluster.n
    while len([ok for ok in client.attested.values() if ok]) < wanted and loop.time() < attest_by:
        await asyncio.sleep(0.01)
    client._require_execution()
    done = asyncio.Event()
    loop_driver = ClosedLoop(client, Workload(seed=seed * 31 + client_id, value_size=10), total=ops,
                             outstanding=outstanding, on_complete=lambda op: ops_done(op))

    def ops_done(op) -> None:
        if loop_driver.finished:
            done.set()

    start = clock.time()
    if ops:
        loop_driver.start()
        await asyncio.wait_for(done.wait(), max(0.1, deadline - loop.time()))
    seconds = (clock.time() - start) / 1000.0
    await transport.close()
    latencies = [float(op.response - op.invoke) for op in client.history.completed()]
    return LoadSummary(loop_driver.completed, seconds, latencies)
