"""Safety, confidentiality and view-change oracles over a finished run."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .cluster import ExecRecord


# ---------------------------------------------------------------- agreement


@dataclass
class AgreementResult:
    ok: bool
    witness: dict | None = None
    checked: int = 0

    def __bool__(self) -> bool:
        return self.ok


def exec_records_from_trace(records: Iterable[dict]) -> dict[int, ExecRecord]:
    out: dict[int, ExecRecord] = defaultdict(ExecRecord)
    for rec in records:
        if rec.get("kind") != "enclave" or rec.get("enclave") != "exec":
            continue
        event, r = rec.get("event"), rec["replica"]
        if event == "executed":
            out[r].executed[rec["n"]] = rec["d"]
        elif event == "installed":
            out[r].installed[rec["n"]] = rec["d"]
        elif event == "checkpoint":
            out[r].checkpoints[rec["n"]] = rec["d"]
    return out


def check_agreement(records: Mapping[int, ExecRecord], correct: Iterable[int]) -> AgreementResult:
    """Executed ``(n, digest)`` sequences of correct Execution enclaves must agree.

    Also compares checkpoint digests and installed snapshots at equal ``n``.
    On failure the witness names the lowest diverging sequence number.
    """
    correct = sorted(correct)
    batches: dict[int, dict[int, str]] = defaultdict(dict)
    states: dict[int, dict[int, str]] = defaultdict(dict)
    for r in correct:
        rec = records.get(r, ExecRecord())
        for n, d in rec.executed.items():
            batches[n][r] = d
        for n, d in list(rec.checkpoints.items()) + list(rec.installed.items()):
            states[n].setdefault(r, d)
            if states[n][r] != d:
                return AgreementResult(False, {"n": n, "what": "state", "replicas": {r: [states[n][r], d]}})
    for what, table in (("batch", batches), ("state", states)):
        for n in sorted(table):
            if len(set(table[n].values())) > 1:
                return AgreementResult(False, {"n": n, "what": what, "replicas": dict(sorted(table[n].items()))},
                                       checked=len(batches))
    return AgreementResult(True, checked=len(batches))


# ---------------------------------------------------------- confidentiality


@dataclass
class LeakReport:
    ok: bool
    sites: list[str] = field(default_factory=list)
    scanned: int = 0

    def __bool__(self) -> bool:
        return self.ok


class LeakScanner:
    """Looks for plaintext canaries and secret key bytes in untrusted places."""

    def __init__(self, canaries: Iterable[bytes], secrets: Iterable[bytes] = ()):
        self.needles = [(b"canary", c) for c in canaries if c]
        self.needles += [(b"secret", s) for s in secrets if s]
        self.sites: list[str] = []
        self.scanned = 0

    def scan(self, site: str, data: bytes) -> None:
        self.scanned += 1
        for label, needle in self.needles:
            if needle in data:
                self.sites.append(f"{label.decode()} in {site}")
                return

    def tap(self, src, dst, data: bytes) -> None:
        self.scan(f"frame {src}->{dst}", data)

    def report(self) -> LeakReport:
        return LeakReport(not self.sites, list(self.sites), self.scanned)


def scan_cluster(scanner: LeakScanner, cluster, trace_text: str | None = None) -> LeakReport:
    """Scan everything outside Execution enclaves and clients at the end of a run."""
    from ..compartments.base import RequestBatch

    for r, broker in enumerate(cluster.brokers):
        for index, blob in broker.store.records:
            scanner.scan(f"store replica {r} block {index}", blob)
        for req in broker._batch:
            scanner.scan(f"batch queue replica {r}", req.wire)
        for kind, event in broker.queue:
            if isinstance(event, RequestBatch):
                for req in event.requests:
                    scanner.scan(f"ecall queue replica {r}", req.wire)
            elif hasattr(event, "wire"):
                scanner.scan(f"ecall queue replica {r}", event.wire)
    for eid, enclave in sorted(cluster.enclaves.items()):
        if eid.kind.short == "exec":
            continue
        for msg in enclave.logged_messages():
            scanner.scan(f"log {eid}", msg.wire)
    if trace_text is not None:
        scanner.scan("trace", trace_text.encode())
    return scanner.report()


# --------------------------------------------------------------- view change


def emission_pattern(sent: Mapping[tuple, int], view: int) -> str:
    """Classify what one replica emitted in ``view``: Prepares and/or Commits."""
    prepares = sent.get(("prep", "Prepare", view), 0)
    commits = sent.get(("conf", "Commit", view), 0)
    if prepares and commits:
        return "both"
    if commits:
        return "commits_only"
    if prepares:
        return "prepares_only"
    return "neither"


@dataclass
class ViewChangeResult:
    ok: bool
    patterns: dict[int, str]
    rejecting: list[int]
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def check_view_change(trace_records: Iterable[dict], sent: Mapping[int, Counter], view: int,
                      correct: Iterable[int], primary: int) -> ViewChangeResult:
    """The corner case: a replica whose Preparation rejected the NewView for
    ``view`` still sends Commits in it, but never Prepares.  Replicas that
    accepted it prepare as usual."""
    rejecting = sorted({r["replica"] for r in trace_records
                        if r.get("kind") == "enclave" and r.get("enclave") == "prep"
                        and r.get("event") == "newview_rejected" and r.get("v") == view})
    patterns = {r: emission_pattern(sent.get(r, {}), view) for r in sorted(correct)}
    for r, pattern in patterns.items():
        if r in rejecting and pattern != "commits_only":
            return ViewChangeResult(False, patterns, rejecting, f"replica {r} rejected the NewView but emitted {pattern}")
        if r not in rejecting and r != primary and pattern not in ("both", "neither"):
            return ViewChangeResult(False, patterns, rejecting, f"replica {r} accepted the NewView but emitted {pattern}")
    return ViewChangeResult(True, patterns, rejecting)
