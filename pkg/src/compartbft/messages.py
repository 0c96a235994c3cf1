"""Wire messages, canonical encoding and digests.

Layout of every encoded message::

    version (1 byte) | type tag (1 byte) | fields in declaration order

Integers are unsigned 64-bit big-endian.  Byte strings are a u32 length
followed by the bytes.  Lists are a u32 count followed by the items; nested
messages are encoded recursively and framed as byte strings.  The
authenticator (signature or MAC) is always the last field and is omitted
from the payload that gets signed.  ``docs/wire-format.md`` has the full
table.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from functools import cached_property, lru_cache
from typing import Any, ClassVar, Union

WIRE_VERSION = 1
DIGEST_SIZE = 32
MAX_NESTING = 6

_U64 = struct.Struct(">Q")
_U32 = struct.Struct(">I")


class MalformedMessage(ValueError):
    """Raised by :func:`decode` for any input that is not a well-formed message."""


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class Message:
    """Mixin for wire messages: cached canonical encodings."""

    TAG: ClassVar[int]
    AUTH: ClassVar[str | None] = None

    @cached_property
    def wire(self) -> bytes:
        return _encode(self, with_auth=True)

    @cached_property
    def body(self) -> bytes:
        """Encoding without the authenticator, i.e. the bytes that get signed/MAC'd."""
        return _encode(self, with_auth=False)

    def with_auth(self, value):
        return replace(self, **{self.AUTH: value})


# ---------------------------------------------------------------- messages


@dataclass(frozen=True, eq=True)
class Request(Message):
    op: bytes
    t: int
    c: int
    auth: tuple[bytes, ...] = ()
    TAG: ClassVar[int] = 1
    AUTH: ClassVar[str] = "auth"

    @property
    def key(self) -> tuple[int, int]:
        return (self.c, self.t)


def batch_digest(batch: tuple[Request, ...]) -> bytes:
    """D(m) for a PrePrepare payload; the empty batch is the null request."""
    parts = [b"batch", _U32.pack(len(batch))]
    for req in batch:
        w = req.wire
        parts.append(_U32.pack(len(w)))
        parts.append(w)
    return digest(b"".join(parts))


@dataclass(frozen=True, eq=True)
class PrePrepare(Message):
    v: int
    n: int
    batch: tuple[Request, ...]
    sig: bytes = b""
    TAG: ClassVar[int] = 2
    AUTH: ClassVar[str] = "sig"

    @cached_property
    def d(self) -> bytes:
        return batch_digest(self.batch)

    @property
    def is_null(self) -> bool:
        return not self.batch


@dataclass(frozen=True, eq=True)
class Prepare(Message):
    v: int
    n: int
    d: bytes
    i: int
    sig: bytes = b""
    TAG: ClassVar[int] = 3
    AUTH: ClassVar[str] = "sig"


@dataclass(frozen=True, eq=True)
class Commit(Message):
    v: int
    n: int
    d: bytes
    i: int
    sig: bytes = b""
    TAG: ClassVar[int] = 4
    AUTH: ClassVar[str] = "sig"


@dataclass(frozen=True, eq=True)
class Checkpoint(Message):
    v: int
    n: int
    d: bytes
    i: int
    sig: bytes = b""
    TAG: ClassVar[int] = 5
    AUTH: ClassVar[str] = "sig"


@dataclass(frozen=True, eq=True)
class PreparedProof(Message):
    """A prepare certificate as carried inside a ViewChange."""

    preprepare: PrePrepare
    prepares: tuple[Prepare, ...]
    TAG: ClassVar[int] = 11

    @property
    def v(self) -> int:
        return self.preprepare.v

    @property
    def n(self) -> int:
        return self.preprepare.n

    @property
    def d(self) -> bytes:
        return self.preprepare.d


@dataclass(frozen=True, eq=True)
class ViewChange(Message):
    new_view: int
    ckpt_n: int
    ckpt_cert: tuple[Checkpoint, ...]
    prepare_certs: tuple[PreparedProof, ...]
    i: int
    sig: bytes = b""
    TAG: ClassVar[int] = 6
    AUTH: ClassVar[str] = "sig"


@dataclass(frozen=True, eq=True)
class NewView(Message):
    v: int
    viewchanges: tuple[ViewChange, ...]
    preprepares: tuple[PrePrepare, ...]
    ckpt_cert: tuple[Checkpoint, ...]
    sig: bytes = b""
    TAG: ClassVar[int] = 7
    AUTH: ClassVar[str] = "sig"

    @property
    def ckpt_n(self) -> int:
        return self.ckpt_cert[0].n if self.ckpt_cert else 0


@dataclass(frozen=True, eq=True)
class Reply(Message):
    v: int
    t: int
    c: int
    i: int
    result: bytes
    auth: bytes = b""
    TAG: ClassVar[int] = 8
    AUTH: ClassVar[str] = "auth"


@dataclass(frozen=True, eq=True)
class FetchState(Message):
    n: int
    d: bytes
    i: int
    sig: bytes = b""
    TAG: ClassVar[int] = 9
    AUTH: ClassVar[str] = "sig"


@dataclass(frozen=True, eq=True)
class StateBlob(Message):
    n: int
    d: bytes
    blob: bytes
    i: int
    sig: bytes = b""
    TAG: ClassVar[int] = 10
    AUTH: ClassVar[str] = "sig"


@dataclass(frozen=True, eq=True)
class Provision(Message):
    """Client to enclave: session material encrypted to the enclave's kex key."""

    c: int
    kind: int
    i: int
    eph_pub: bytes
    sealed: bytes
    sig: bytes = b""
    TAG: ClassVar[int] = 12
    AUTH: ClassVar[str] = "sig"


@dataclass(frozen=True, eq=True)
class ProvisionAck(Message):
    c: int
    kind: int
    i: int
    ok: int
    sig: bytes = b""
    TAG: ClassVar[int] = 13
    AUTH: ClassVar[str] = "sig"


ProtocolMessage = Union[
    Request, PrePrepare, Prepare, Commit, Checkpoint, ViewChange, NewView,
    Reply, FetchState, StateBlob, Provision, ProvisionAck,
]

# ------------------------------------------------------------------ schema

_INT, _BYTES, _DIGEST, _BYTES_LIST = "int", "bytes", "digest", "bytes*"

_SCHEMA: dict[type, tuple[tuple[str, Any], ...]] = {
    Request: (("op", _BYTES), ("t", _INT), ("c", _INT), ("auth", _BYTES_LIST)),
    PrePrepare: (("v", _INT), ("n", _INT), ("batch", [Request]), ("sig", _BYTES)),
    Prepare: (("v", _INT), ("n", _INT), ("d", _DIGEST), ("i", _INT), ("sig", _BYTES)),
    Commit: (("v", _INT), ("n", _INT), ("d", _DIGEST), ("i", _INT), ("sig", _BYTES)),
    Checkpoint: (("v", _INT), ("n", _INT), ("d", _DIGEST), ("i", _INT), ("sig", _BYTES)),
    PreparedProof: (("preprepare", PrePrepare), ("prepares", [Prepare])),
    ViewChange: (
        ("new_view", _INT), ("ckpt_n", _INT), ("ckpt_cert", [Checkpoint]),
        ("prepare_certs", [PreparedProof]), ("i", _INT), ("sig", _BYTES),
    ),
    NewView: (
        ("v", _INT), ("viewchanges", [ViewChange]), ("preprepares", [PrePrepare]),
        ("ckpt_cert", [Checkpoint]), ("sig", _BYTES),
    ),
    Reply: (("v", _INT), ("t", _INT), ("c", _INT), ("i", _INT), ("result", _BYTES), ("auth", _BYTES)),
    FetchState: (("n", _INT), ("d", _DIGEST), ("i", _INT), ("sig", _BYTES)),
    StateBlob: (("n", _INT), ("d", _DIGEST), ("blob", _BYTES), ("i", _INT), ("sig", _BYTES)),
    Provision: (("c", _INT), ("kind", _INT), ("i", _INT), ("eph_pub", _BYTES), ("sealed", _BYTES), ("sig", _BYTES)),
    ProvisionAck: (("c", _INT), ("kind", _INT), ("i", _INT), ("ok", _INT), ("sig", _BYTES)),
}

_BY_TAG = {cls.TAG: cls for cls in _SCHEMA}


def _put_bytes(out: list, b: bytes) -> None:
    out.append(_U32.pack(len(b)))
    out.append(b)


def _encode(msg: Message, with_auth: bool) -> bytes:
    cls = type(msg)
    schema = _SCHEMA.get(cls)
    if schema is None:
        raise TypeError(f"not a wire message: {cls.__name__}")
    out: list[bytes] = [bytes((WIRE_VERSION, cls.TAG))]
    for name, codec in schema:
        if not with_auth and name == cls.AUTH:
            continue
        value = getattr(msg, name)
        if codec is _INT:
            if not 0 <= value < 1 << 64:
                raise ValueError(f"{cls.__name__}.{name} out of u64 range: {value}")
            out.append(_U64.pack(value))
        elif codec is _BYTES or codec is _DIGEST:
            if codec is _DIGEST and len(value) != DIGEST_SIZE:
                raise ValueError(f"{cls.__name__}.{name} must be {DIGEST_SIZE} bytes")
            _put_bytes(out, bytes(value))
        elif codec is _BYTES_LIST:
            out.append(_U32.pack(len(value)))
            for item in value:
                _put_bytes(out, bytes(item))
        elif isinstance(codec, list):
            out.append(_U32.pack(len(value)))
            for item in value:
                if type(item) is not codec[0]:
                    raise TypeError(f"{cls.__name__}.{name} expects {codec[0].__name__}")
                _put_bytes(out, item.wire)
        else:
            if type(value) is not codec:
                raise TypeError(f"{cls.__name__}.{name} expects {codec.__name__}")
            _put_bytes(out, value.wire)
    return b"".join(out)


def encode(msg: Message) -> bytes:
    return msg.wire


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, k: int) -> bytes:
        end = self.pos + k
        if end > len(self.data):
            raise MalformedMessage("truncated input")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def count(self) -> int:
        k = self.u32()
        # every item needs at least its own 4-byte length prefix
        if k * 4 > len(self.data) - self.pos:
            raise MalformedMessage("list count exceeds input")
        return k


def _decode(data: bytes, depth: int, expect: type | None = None) -> Message:
    if depth > MAX_NESTING:
        raise MalformedMessage("nesting too deep")
    if len(data) < 2:
        raise MalformedMessage("truncated header")
    if data[0] != WIRE_VERSION:
        raise MalformedMessage(f"unsupported version {data[0]}")
    cls = _BY_TAG.get(data[1])
    if cls is None:
        raise MalformedMessage(f"unknown type tag {data[1]}")
    if expect is not None and cls is not expect:
        raise MalformedMessage(f"expected {expect.__name__}, got {cls.__name__}")
    r = _Reader(data)
    r.pos = 2
    values = {}
    for name, codec in _SCHEMA[cls]:
        if codec is _INT:
            values[name] = r.u64()
        elif codec is _BYTES:
            values[name] = r.blob()
        elif codec is _DIGEST:
            d = r.blob()
            if len(d) != DIGEST_SIZE:
                raise MalformedMessage(f"{name}: bad digest length {len(d)}")
            values[name] = d
        elif codec is _BYTES_LIST:
            values[name] = tuple(r.blob() for _ in range(r.count()))
        elif isinstance(codec, list):
            values[name] = tuple(_decode(r.blob(), depth + 1, codec[0]) for _ in range(r.count()))
        else:
            values[name] = _decode(r.blob(), depth + 1, codec)
    if r.pos != len(data):
        raise MalformedMessage("trailing bytes")
    msg = cls(**values)
    # decoded bytes are canonical by construction
    msg.__dict__["wire"] = bytes(data)
    return msg


@lru_cache(maxsize=8192)
def _decode_cached(data: bytes) -> Message:
    return _decode(data, 0)


def decode(data: bytes) -> ProtocolMessage:
    """Parse untrusted bytes.  Raises :class:`MalformedMessage` and nothing else."""
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise MalformedMessage("input is not bytes")
    try:
        msg = _decode_cached(bytes(data))
    except MalformedMessage:
        raise
    except Exception as exc:  # struct errors, bad field values, ...
        raise MalformedMessage(str(exc)) from exc
    if isinstance(msg, PreparedProof):
        raise MalformedMessage("PreparedProof is not a top-level message")
    return msg


# ----------------------------------------------------------------- helpers


def describe(msg: Message) -> dict:
    """Small, payload-free summary used in traces."""
    out: dict[str, Any] = {"type": type(msg).__name__}
    for attr in ("v", "new_view", "n", "c", "t", "i"):
        if hasattr(msg, attr):
            val = getattr(msg, attr)
            if isinstance(val, int):
                out[attr] = val
    if isinstance(msg, (PrePrepare, Prepare, Commit, Checkpoint, FetchState, StateBlob)):
        out["d"] = msg.d.hex()[:16]
    if isinstance(msg, PrePrepare):
        out["size"] = len(msg.batch)
    return out


def message_seqnos(msg: Message) -> list[int]:
    """Sequence numbers a message pertains to (used by GC assertions)."""
    if isinstance(msg, (PrePrepare, Prepare, Commit, Checkpoint)):
        return [msg.n]
    if isinstance(msg, PreparedProof):
        return [msg.n]
    if isinstance(msg, ViewChange):
        return [p.n for p in msg.prepare_certs]
    if isinstance(msg, NewView):
        return [p.n for p in msg.preprepares]
    return []


NULL_BATCH: tuple[Request, ...] = ()
