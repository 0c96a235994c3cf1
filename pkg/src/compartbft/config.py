"""Cluster configuration, identities and view/window arithmetic."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple


class CompartmentKind(enum.IntEnum):
    PREPARATION = 0
    CONFIRMATION = 1
    EXECUTION = 2

    @property
    def short(self) -> str:
        return ("prep", "conf", "exec")[self]

    @classmethod
    def parse(cls, text: str) -> "CompartmentKind":
        text = text.strip().lower()
        for kind in cls:
            if text in (kind.short, kind.name.lower()):
                return kind
        raise ValueError(f"unknown compartment kind {text!r}")


class EnclaveId(NamedTuple):
    replica: int
    kind: CompartmentKind

    def __str__(self) -> str:
        return f"{self.kind.short}@{self.replica}"

    @classmethod
    def parse(cls, text: str) -> "EnclaveId":
        kind, _, replica = text.partition("@")
        return cls(int(replica), CompartmentKind.parse(kind))


@dataclass(frozen=True)
class Config:
    """Static cluster parameters, loaded into every enclave at bootstrap.

    Durations are in transport ticks; the simulated network treats one tick
    as one millisecond.
    """

    n: int = 4
    f: int = 1
    checkpoint_interval: int = 100
    window: int = 200
    batch_max: int = 1
    batch_timeout: int = 10
    request_timeout: int = 500
    viewchange_timeout: int = 1000

    def __post_init__(self) -> None:
        if self.f < 0 or self.n != 3 * self.f + 1:
            raise ValueError(f"need n = 3f + 1, got n={self.n} f={self.f}")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be positive")
        if self.window < self.checkpoint_interval:
            raise ValueError("window must be >= checkpoint_interval")
        if self.batch_max < 1:
            raise ValueError("batch_max must be >= 1")
        if min(self.batch_timeout, self.request_timeout, self.viewchange_timeout) < 1:
            raise ValueError("timeouts must be positive")

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    @property
    def reply_quorum(self) -> int:
        return self.f + 1

    @classmethod
    def for_faults(cls, f: int, **kw) -> "Config":
        return cls(n=3 * f + 1, f=f, **kw)

    def enclaves(self) -> list[EnclaveId]:
        return [EnclaveId(r, k) for r in range(self.n) for k in CompartmentKind]


def primary_of(view: int, cfg: Config) -> int:
    if view < 0:
        raise ValueError("view must be non-negative")
    return view % cfg.n


def in_window(n: int, low_watermark: int, cfg: Config) -> bool:
    return low_watermark < n <= low_watermark + cfg.window


def in_wv(v: int, n: int, state) -> bool:
    """True iff ``v`` is the state's view and ``n`` lies in its watermark window."""
    return v == state.view and in_window(n, state.low_watermark, state.cfg)
