"""Structured JSON-lines trace of a run."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

LEVELS = ("metrics", "full")

# kinds kept at the metrics level; everything else is full-level detail
_METRIC_KINDS = {"enclave", "timeout", "viewchange_timeout", "client", "fault", "malformed"}
_QUIET_EVENTS = {"ignored", "stale_drop", "bad_signature"}


class Trace:
    """Collects trace records; at ``metrics`` level per-message detail is skipped."""

    def __init__(self, level: str = "metrics", path: str | Path | None = None):
        if level not in LEVELS:
            raise ValueError(f"trace level must be one of {LEVELS}")
        self.level = level
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self.observers: list[Callable[[dict], None]] = []

    def __call__(self, record: dict) -> None:
        if self.level == "metrics":
            if record["kind"] not in _METRIC_KINDS:
                return
            if record["kind"] == "enclave" and record.get("event") in _QUIET_EVENTS:
                return
        self.records.append(record)
        for obs in self.observers:
            obs(record)

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records)

    def write(self, path: str | Path | None = None) -> Path:
        target = Path(path) if path else self.path
        if target is None:
            raise ValueError("no trace path given")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(self.dumps())
        return target

    def select(self, kind: str | None = None, **match) -> list[dict]:
        return [r for r in self.records
                if (kind is None or r["kind"] == kind) and all(r.get(k) == v for k, v in match.items())]

    @staticmethod
    def load(path: str | Path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
