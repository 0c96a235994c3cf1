"""Declarative, seeded scenarios and the runner that executes and checks them."""
from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..broker import Misbehavior, Rule
from ..client import CANARY, ClosedLoop, Workload
from ..config import CompartmentKind, Config, EnclaveId, primary_of
from ..messages import decode
from ..transport.simnet import LinkPolicy
from .checkers import (
    AgreementResult, LeakReport, LeakScanner, ViewChangeResult, check_agreement, check_view_change, scan_cluster,
)
from .cluster import SimCluster
from .faults import Behavior, FaultSpec, environment_rules
from .linearizability import LinResult, check_linearizable, from_history
from .trace import Trace

CHECKS = ("agreement", "linearizable", "liveness", "confidentiality", "view_change")


@dataclass
class NetworkSpec:
    delay: int = 1
    jitter: int = 0
    drop: float = 0.0
    duplicate: float = 0.0
    liveness: bool = True


@dataclass
class TimedEvent:
    """Something the harness does at a given tick."""

    at: int
    action: str  # crash | partition | heal | replay_stale
    replica: int | None = None
    a: list[int] = field(default_factory=list)
    b: list[int] = field(default_factory=list)

    ACTIONS = ("crash", "partition", "heal", "replay_stale")

    def __post_init__(self) -> None:
        if self.action not in self.ACTIONS:
            raise ValueError(f"unknown timed action {self.action!r}")


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    f: int = 1
    config: dict = field(default_factory=dict)
    app: str = "kvs"
    clients: int = 1
    ops: int = 100
    outstanding: int = 1
    keys: int = 8
    max_ticks: int = 200_000
    drain: int = 300
    network: NetworkSpec = field(default_factory=NetworkSpec)
    faults: list[FaultSpec] = field(default_factory=list)
    brokers: dict[int, Misbehavior] = field(default_factory=dict)
    events: list[TimedEvent] = field(default_factory=list)
    reject_attestation: list[EnclaveId] = field(default_factory=list)
    encrypt: bool = True
    corrupt_env: bool = True
    trace_level: str = "metrics"
    expect: dict[str, bool] = field(default_factory=dict)
    view_check: int | None = None

    def cfg(self) -> Config:
        return Config.for_faults(self.f, **self.config)

    # (de)serialisation ---------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        if "network" in data:
            data["network"] = NetworkSpec(**data["network"])
        data["faults"] = [FaultSpec(**f) for f in data.get("faults", [])]
        brokers = {}
        for r, spec in (data.get("brokers") or {}).items():
            spec = dict(spec)
            rules = [Rule(**rule) for rule in spec.pop("rules", [])]
            brokers[int(r)] = Misbehavior(rules=rules, **spec)
        data["brokers"] = brokers
        data["events"] = [TimedEvent(**e) for e in data.get("events", [])]
        data["reject_attestation"] = [EnclaveId.parse(e) if isinstance(e, str) else e
                                      for e in data.get("reject_attestation", [])]
        unknown = set(data.get("expect", {})) - set(CHECKS)
        if unknown:
            raise ValueError(f"unknown expectations: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def expected(self, check: str) -> bool | None:
        default = {"agreement": True, "linearizable": True, "liveness": True, "confidentiality": True}
        return self.expect.get(check, default.get(check))


@dataclass
class RunResult:
    scenario: Scenario
    cluster: SimCluster
    trace: Trace
    completed: int
    issued: int
    agreement: AgreementResult
    linearizable: LinResult | None
    confidentiality: LeakReport
    view_change: ViewChangeResult | None
    ticks: int

    @property
    def live(self) -> bool:
        return self.completed >= self.scenario.ops

    def outcome(self, check: str) -> bool | None:
        value = {
            "agreement": self.agreement.ok,
            "linearizable": None if self.linearizable is None else self.linearizable.ok,
            "liveness": self.live,
            "confidentiality": self.confidentiality.ok,
            "view_change": None if self.view_change is None else self.view_change.ok,
        }[check]
        return value

    def failures(self) -> list[str]:
        out = []
        for check in CHECKS:
            want, got = self.scenario.expected(check), self.outcome(check)
            if want is None or got is None:
                continue
            if want != got:
                out.append(f"{check}: expected {'PASS' if want else 'FAIL'}, got {'PASS' if got else 'FAIL'}")
        return out

    @property
    def passed(self) -> bool:
        return not self.failures()

    def report(self) -> str:
        lines = [f"scenario {self.scenario.name} seed={self.scenario.seed} ticks={self.ticks} "
                 f"ops={self.completed}/{self.scenario.ops}"]
        for check in CHECKS:
            got = self.outcome(check)
            if got is None:
                continue
            detail = ""
            if check == "agreement" and not got:
                detail = f" witness={self.agreement.witness}"
            elif check == "linearizable" and not got:
                detail = f" {self.linearizable.reason}"
            elif check == "confidentiality" and not got:
                detail = f" first leak: {self.confidentiality.sites[0]}"
            elif check == "view_change":
                detail = f" patterns={self.view_change.patterns} rejecting={self.view_change.rejecting}"
            want = self.scenario.expected(check)
            mark = "" if want is None or want == got else "  (UNEXPECTED)"
            lines.append(f"  {check:16s} {'PASS' if got else 'FAIL'}{detail}{mark}")
        lines.append("  result           " + ("OK" if self.passed else "MISMATCH: " + "; ".join(self.failures())))
        return "\n".join(lines)


def _misbehavior(scenario: Scenario) -> dict[int, Misbehavior]:
    out = dict(scenario.brokers)
    if scenario.corrupt_env:
        byzantine = sorted({spec.enclave.replica for spec in scenario.faults
                            if spec.behavior not in (Behavior.CRASH, Behavior.CORRUPT_ENV)}
                           | {spec.enclave.replica for spec in scenario.faults
                              if spec.behavior is Behavior.CORRUPT_ENV})
        for r in byzantine:
            env = environment_rules(scenario.seed * 1000 + r)
            if r in out:
                out[r] = Misbehavior(out[r].rules + env.rules, out[r].stop_timers, out[r].seed)
            else:
                out[r] = env
    return out


def run(scenario: Scenario, trace_path: str | Path | None = None) -> RunResult:
    cfg = scenario.cfg()
    trace = Trace(scenario.trace_level, trace_path)
    net = scenario.network
    cluster = SimCluster(
        cfg, clients=scenario.clients, seed=scenario.seed, app=scenario.app,
        link=LinkPolicy(net.delay, net.jitter, net.drop, net.duplicate), liveness=net.liveness,
        trace=trace, encrypt=scenario.encrypt, faults=scenario.faults, misbehavior=_misbehavior(scenario),
        reject_attestation=set(scenario.reject_attestation),
    )
    canary = CANARY + b"%d:" % scenario.seed
    scanner = LeakScanner([canary], _secrets(cluster))
    cluster.net.taps.append(scanner.tap)
    _schedule_events(cluster, scenario)

    per_client = [scenario.ops // scenario.clients + (1 if c < scenario.ops % scenario.clients else 0)
                  for c in range(scenario.clients)]
    loops = [ClosedLoop(client, Workload(seed=scenario.seed * 7919 + c, keys=scenario.keys, canary=canary),
                        total=per_client[c], outstanding=scenario.outstanding)
             for c, client in enumerate(cluster.clients)]
    for loop in loops:
        loop.start()
    cluster.run(until=scenario.max_ticks, stop=lambda: all(loop.finished for loop in loops))
    cluster.run(until=min(scenario.max_ticks, cluster.now + scenario.drain))

    correct_exec = [r for r in range(cfg.n)
                    if not cluster.is_faulty(EnclaveId(r, CompartmentKind.EXECUTION))]
    agreement = check_agreement(cluster.records, correct_exec)
    linearizable = check_linearizable(from_history(cluster.history.ops)) if scenario.app == "kvs" else None
    confidentiality = scan_cluster(scanner, cluster, trace.dumps())
    view_change = None
    if scenario.view_check is not None:
        v = scenario.view_check
        sent = {r: b.stats.sent for r, b in enumerate(cluster.brokers)}
        view_change = check_view_change(trace.records, sent, v, cluster.correct_replicas(), primary_of(v, cfg))
    if trace_path is not None:
        trace.write()
    return RunResult(scenario, cluster, trace, sum(l.completed for l in loops), sum(l.issued for l in loops),
                     agreement, linearizable, confidentiality, view_change, cluster.now)


def _secrets(cluster: SimCluster) -> list[bytes]:
    out = cluster.keys.secret_fingerprints()
    for client in cluster.clients:
        out.append(client.session.s_enc)
        out.extend(client.session.mac_keys.values())
    return out


def _schedule_events(cluster: SimCluster, scenario: Scenario) -> None:
    stale: dict[int, list[bytes]] = {}

    def remember(src, dst, data: bytes) -> None:
        # frames kept for replay_stale events; a hostile host can always record traffic
        if dst[0] == "replica":
            stale.setdefault(dst[1], []).append(data)

    if any(e.action == "replay_stale" for e in scenario.events):
        cluster.net.taps.append(remember)

    for event in scenario.events:
        def fire(e=event) -> None:
            if e.action == "crash":
                cluster.crash_replica(e.replica)
            elif e.action == "partition":
                cluster.net.partition([("replica", r) for r in e.a], [("replica", r) for r in e.b])
            elif e.action == "heal":
                cluster.net.heal()
            elif e.action == "replay_stale":
                replay_stale(cluster, e.replica, stale.get(e.replica, []))
        cluster.scheduler.call_at(event.at, fire)


def replay_stale(cluster: SimCluster, replica: int, frames: list[bytes]) -> Counter:
    """Re-inject every recorded frame addressed to ``replica`` that is now below its watermark."""
    broker = cluster.brokers[replica]
    counts: Counter = Counter()
    for data in frames:
        msg = decode(data)
        n = getattr(msg, "n", None)
        if n is None or n > broker.enclaves[CompartmentKind.PREPARATION].low_watermark:
            continue
        counts[type(msg).__name__] += 1
        broker.route(msg)
    if cluster.trace is not None:
        cluster.trace({"t": cluster.now, "replica": replica, "kind": "fault", "event": "replay_stale",
                       "count": sum(counts.values())})
    return counts


def load_and_run(path: str | Path, trace_path: str | Path | None = None) -> RunResult:
    return run(Scenario.load(path), trace_path)


__all__ = ["CHECKS", "NetworkSpec", "RunResult", "Scenario", "TimedEvent", "load_and_run", "replay_stale", "run"]
