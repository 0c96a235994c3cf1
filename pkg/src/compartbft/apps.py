"""Deterministic replicated applications run inside the Execution compartment."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Protocol

OK = b"OK"
NOT_FOUND = b"NF"
PARSE_ERROR = b"ERR"
VALUE = b"V"

BLOCK_SIZE = 5

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


@dataclass(frozen=True)
class PersistRecord:
    """Plaintext the application wants written outside the enclave."""

    index: int
    payload: bytes


class Application(Protocol):
    name: str

    def apply(self, client: int, op: bytes) -> bytes: ...

    def end_batch(self) -> list[PersistRecord]: ...

    def snapshot(self) -> bytes: ...

    def restore(self, blob: bytes) -> None: ...

    def digest(self) -> bytes: ...


def _lp(b: bytes) -> bytes:
    return _U32.pack(len(b)) + b


def _read_lp(buf: bytes, pos: int) -> tuple[bytes, int]:
    if pos + 4 > len(buf):
        raise ValueError("truncated")
    k = _U32.unpack_from(buf, pos)[0]
    end = pos + 4 + k
    if end > len(buf):
        raise ValueError("truncated")
    return buf[pos + 4:end], end


# ----------------------------------------------------------------- kv store


@dataclass(frozen=True)
class KvsOp:
    kind: str  # "PUT" | "GET" | "DELETE"
    key: bytes
    value: bytes = b""

    def encode(self) -> bytes:
        if len(self.key) > 0xFFFF:
            raise ValueError("key too long")
        return self.kind[0].encode() + _U16.pack(len(self.key)) + self.key + self.value

    @classmethod
    def parse(cls, raw: bytes) -> "KvsOp":
        if len(raw) < 3:
            raise ValueError("op too short")
        kind = {b"P": "PUT", b"G": "GET", b"D": "DELETE"}.get(raw[:1])
        if kind is None:
            raise ValueError(f"unknown op kind {raw[:1]!r}")
        klen = _U16.unpack_from(raw, 1)[0]
        if 3 + klen > len(raw):
            raise ValueError("key overruns op")
        key, value = raw[3:3 + klen], raw[3 + klen:]
        if kind != "PUT" and value:
            raise ValueError(f"{kind} takes no value")
        return cls(kind, key, value)


def put(key: bytes, value: bytes) -> bytes:
    return KvsOp("PUT", key, value).encode()


def get(key: bytes) -> bytes:
    return KvsOp("GET", key).encode()


def delete(key: bytes) -> bytes:
    return KvsOp("DELETE", key).encode()


def kvs_apply(store: dict[bytes, bytes], op: bytes) -> bytes:
    try:
        parsed = KvsOp.parse(op)
    except ValueError:
        return PARSE_ERROR
    if parsed.kind == "PUT":
        store[parsed.key] = parsed.value
        return OK
    if parsed.kind == "GET":
        value = store.get(parsed.key)
        return NOT_FOUND if value is None else VALUE + value
    if store.pop(parsed.key, None) is None:
        return NOT_FOUND
    return OK


class KeyValueStore:
    name = "kvs"

    def __init__(self) -> None:
        self.store: dict[bytes, bytes] = {}
        self._dirty: list[bytes] = []
        self._batches = 0

    def apply(self, client: int, op: bytes) -> bytes:
        result = kvs_apply(self.store, op)
        self._dirty.append(op)
        return result

    def end_batch(self) -> list[PersistRecord]:
        # one write-out per executed batch
        if not self._dirty:
            return []
        self._batches += 1
        payload = b"".join(_lp(op) for op in self._dirty)
        self._dirty = []
        return [PersistRecord(self._batches, payload)]

    def snapshot(self) -> bytes:
        return b"kvs" + b"".join(_lp(k) + _lp(self.store[k]) for k in sorted(self.store))

    def restore(self, blob: bytes) -> None:
        if blob[:3] != b"kvs":
            raise ValueError("not a kvs snapshot")
        store, pos = {}, 3
        while pos < len(blob):
            k, pos = _read_lp(blob, pos)
            v, pos = _read_lp(blob, pos)
            store[k] = v
        self.store = store
        self._dirty = []

    def digest(self) -> bytes:
        return hashlib.sha256(self.snapshot()).digest()


# ------------------------------------------------------------------ ledger


@dataclass(frozen=True)
class LedgerBlock:
    index: int
    prev_digest: bytes
    entries: tuple[bytes, ...]

    def encode(self) -> bytes:
        return _U64.pack(self.index) + _lp(self.prev_digest) + _U32.pack(len(self.entries)) + b"".join(
            _lp(e) for e in self.entries)

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(b"block" + self.encode()).digest()

    @classmethod
    def decode(cls, raw: bytes) -> "LedgerBlock":
        index = _U64.unpack_from(raw, 0)[0]
        prev, pos = _read_lp(raw, 8)
        count = _U32.unpack_from(raw, pos)[0]
        pos += 4
        entries = []
        for _ in range(count):
            e, pos = _read_lp(raw, pos)
            entries.append(e)
        if pos != len(raw):
            raise ValueError("trailing bytes in block")
        return cls(index, prev, tuple(entries))


GENESIS = b"\x00" * 32


def verify_chain(blocks: Iterable[LedgerBlock], start_prev: bytes = GENESIS) -> bool:
    prev = start_prev
    expected_index = None
    for block in blocks:
        if block.prev_digest != prev or len(block.entries) != BLOCK_SIZE:
            return False
        if expected_index is not None and block.index != expected_index:
            return False
        expected_index = block.index + 1
        prev = block.digest
    return True


class Ledger:
    """Appends every request to a hash-chained log, sealing a block per five entries."""

    name = "ledger"

    def __init__(self) -> None:
        self.pending: list[bytes] = []
        self.head = GENESIS
        self.height = 0
        self.entries = 0
        self.unacked: dict[int, LedgerBlock] = {}
        self._sealed: list[PersistRecord] = []

    def apply(self, client: int, op: bytes) -> bytes:
        self.pending.append(_U64.pack(client) + op)
        self.entries += 1
        position = self.entries
        if len(self.pending) == BLOCK_SIZE:
            block = LedgerBlock(self.height, self.head, tuple(self.pending))
            self.head = block.digest
            self.height += 1
            self.pending = []
            self.unacked[block.index] = block
            self._sealed.append(PersistRecord(block.index, block.encode()))
        return b"L" + _U64.pack(position)

    def end_batch(self) -> list[PersistRecord]:
        out, self._sealed = self._sealed, []
        return out

    def acknowledge(self, indices: Iterable[int]) -> None:
        for i in indices:
            self.unacked.pop(i, None)

    def snapshot(self) -> bytes:
        return (b"ldg" + _U64.pack(self.height) + _U64.pack(self.entries) + self.head
                + _U32.pack(len(self.pending)) + b"".join(_lp(p) for p in self.pending))

    def restore(self, blob: bytes) -> None:
        if blob[:3] != b"ldg":
            raise ValueError("not a ledger snapshot")
        self.height = _U64.unpack_from(blob, 3)[0]
        self.entries = _U64.unpack_from(blob, 11)[0]
        self.head = blob[19:51]
        count = _U32.unpack_from(blob, 51)[0]
        pos, pending = 55, []
        for _ in range(count):
            p, pos = _read_lp(blob, pos)
            pending.append(p)
        self.pending = pending
        self.unacked = {}
        self._sealed = []

    def digest(self) -> bytes:
        return hashlib.sha256(self.snapshot()).digest()


APPS = {"kvs": KeyValueStore, "ledger": Ledger}


def make_app(name: str) -> Application:
    try:
        return APPS[name]()
    except KeyError:
        raise ValueError(f"unknown application {name!r}; choose from {sorted(APPS)}") from None
