"""Wing & Gong style linearizability search for key-value histories.

Every operation touches one key, so the history is split per key and each
part is checked against a single-register model.  The search memoizes on
(linearized set, register value) as in the Lowe/WGL refinement.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from ..apps import NOT_FOUND, OK, VALUE, KvsOp


@dataclass(frozen=True)
class HistOp:
    client: int
    invoke: float
    response: float  # math.inf for operations that never returned
    kind: str
    key: bytes
    value: bytes
    result: bytes | None

    @property
    def pending(self) -> bool:
        return self.response == math.inf


@dataclass
class LinResult:
    ok: bool
    key: bytes | None = None
    ops: list[HistOp] = field(default_factory=list)
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def from_history(history) -> list[HistOp]:
    """Convert client :class:`~compartbft.client.Operation` records."""
    out = []
    for op in history:
        parsed = KvsOp.parse(op.op)
        response = math.inf if op.response is None else op.response
        out.append(HistOp(op.client, op.invoke, response, parsed.kind, parsed.key, parsed.value, op.result))
    return out


def step(state: bytes | None, op: HistOp) -> tuple[bool, bytes | None]:
    """Apply ``op`` to a register holding ``state``; returns (result matches, new state)."""
    if op.kind == "PUT":
        expected, new = OK, op.value
    elif op.kind == "GET":
        expected, new = (NOT_FOUND if state is None else VALUE + state), state
    else:
        expected, new = (NOT_FOUND if state is None else OK), None
    return op.pending or op.result == expected, new


def _check_key(ops: list[HistOp]) -> bool:
    ops = sorted(ops, key=lambda o: (o.invoke, o.response))
    done_mask = 0
    complete = 0
    for i, o in enumerate(ops):
        if not o.pending:
            complete |= 1 << i
    seen: set[tuple[int, bytes | None]] = set()
    stack: list[tuple[int, bytes | None]] = [(done_mask, None)]
    while stack:
        mask, state = stack.pop()
        if mask & complete == complete:
            return True
        if (mask, state) in seen:
            continue
        seen.add((mask, state))
        # an op may go next only if nothing still open finished before it started
        horizon = min((o.response for i, o in enumerate(ops) if not mask >> i & 1), default=math.inf)
        for i, o in enumerate(ops):
            if mask >> i & 1 or o.invoke > horizon:
                continue
            ok, new = step(state, o)
            if ok:
                stack.append((mask | 1 << i, new))
    return False


def check_linearizable(ops: Iterable[HistOp]) -> LinResult:
    by_key: dict[bytes, list[HistOp]] = defaultdict(list)
    for op in ops:
        by_key[op.key].append(op)
    for key in sorted(by_key):
        if not _check_key(by_key[key]):
            part = sorted(by_key[key], key=lambda o: (o.invoke, o.response))
            return LinResult(False, key, part, f"no linearization for key {key!r}")
    return LinResult(True)
