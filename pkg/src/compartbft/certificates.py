"""Quorum certificates: assembly from candidate messages and validation."""
from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

from .config import Config, primary_of
from .crypto import KeyRegistry, verify_message
from .messages import Checkpoint, Commit, PreparedProof, PrePrepare, Prepare, ViewChange


class CertKind(enum.Enum):
    PREPARE_CERT = "prepare"
    COMMIT_QUORUM = "commit"
    CHECKPOINT_CERT = "checkpoint"
    VIEWCHANGE_QUORUM = "viewchange"


class InsufficientQuorum(Exception):
    pass


class ConflictingCertificates(Exception):
    """Two certificates for the same slot with different digests.

    This can only happen when more enclaves than tolerated misbehave; it is
    surfaced as evidence, never resolved silently.
    """

    def __init__(self, certificates: Sequence["Certificate"]):
        super().__init__(f"{len(certificates)} conflicting certificates")
        self.certificates = tuple(certificates)


@dataclass(frozen=True)
class Certificate:
    kind: CertKind
    members: tuple
    threshold: int

    @property
    def n(self) -> int:
        if self.kind is CertKind.VIEWCHANGE_QUORUM:
            raise AttributeError("viewchange quorums have no sequence number")
        return self.members[0].n

    @property
    def v(self) -> int:
        first = self.members[0]
        return first.new_view if isinstance(first, ViewChange) else first.v

    @property
    def d(self) -> bytes:
        return self.members[0].d

    @property
    def senders(self) -> list[int]:
        return [_sender(x, None) for x in self.members]

    def as_proof(self) -> PreparedProof:
        if self.kind is not CertKind.PREPARE_CERT:
            raise TypeError("only prepare certificates become PreparedProofs")
        return PreparedProof(self.members[0], tuple(self.members[1:]))


def threshold_for(kind: CertKind, cfg: Config) -> int:
    # for prepare certificates the threshold counts the PrePrepare as well
    return cfg.quorum


def _sender(msg, cfg: Config | None) -> int:
    if isinstance(msg, PrePrepare):
        return primary_of(msg.v, cfg) if cfg else -1
    if isinstance(msg, ViewChange):
        return msg.i
    return msg.i


_MEMBER = {
    CertKind.COMMIT_QUORUM: Commit,
    CertKind.CHECKPOINT_CERT: Checkpoint,
    CertKind.VIEWCHANGE_QUORUM: ViewChange,
}


def _group_key(kind: CertKind, msg):
    if kind is CertKind.CHECKPOINT_CERT:
        return (msg.n, msg.d)
    if kind is CertKind.VIEWCHANGE_QUORUM:
        return (msg.new_view,)
    return (msg.v, msg.n, msg.d)


def _slot(kind: CertKind, key: tuple) -> tuple:
    if kind is CertKind.CHECKPOINT_CERT:
        return key[:1]
    if kind is CertKind.VIEWCHANGE_QUORUM:
        return key
    return key[:2]


def assemble_certificate(kind: CertKind, candidates: Iterable, cfg: Config) -> Certificate:
    """Pick a certificate of ``kind`` out of ``candidates``.

    Candidates must already be signature-checked.  When a group is
    oversupplied the members with the lowest replica ids are chosen, so the
    result is reproducible.  Raises :class:`InsufficientQuorum` or
    :class:`ConflictingCertificates`.
    """
    found: dict[tuple, Certificate] = {}
    if kind is CertKind.PREPARE_CERT:
        pps: dict[tuple, PrePrepare] = {}
        prepares: dict[tuple, dict[int, Prepare]] = defaultdict(dict)
        for msg in candidates:
            if isinstance(msg, PrePrepare):
                pps.setdefault((msg.v, msg.n, msg.d), msg)
            elif isinstance(msg, Prepare) and msg.i != primary_of(msg.v, cfg) and msg.i < cfg.n:
                prepares[(msg.v, msg.n, msg.d)].setdefault(msg.i, msg)
        need = 2 * cfg.f
        for key, pp in pps.items():
            senders = sorted(prepares.get(key, {}))
            if len(senders) >= need:
                chosen = tuple(prepares[key][i] for i in senders[:need])
                found[key] = Certificate(kind, (pp,) + chosen, cfg.quorum)
    else:
        cls = _MEMBER[kind]
        groups: dict[tuple, dict[int, object]] = defaultdict(dict)
        for msg in candidates:
            if type(msg) is cls and msg.i < cfg.n:
                groups[_group_key(kind, msg)].setdefault(msg.i, msg)
        for key, by_sender in groups.items():
            if len(by_sender) >= cfg.quorum:
                ids = sorted(by_sender)[: cfg.quorum]
                found[key] = Certificate(kind, tuple(by_sender[i] for i in ids), cfg.quorum)
    if not found:
        raise InsufficientQuorum(kind.value)
    by_slot: dict[tuple, list[tuple]] = defaultdict(list)
    for key in found:
        by_slot[_slot(kind, key)].append(key)
    first_slot = min(by_slot)
    keys = sorted(by_slot[first_slot])
    if len(keys) > 1:
        raise ConflictingCertificates([found[k] for k in keys])
    return found[keys[0]]


def validate_members(kind: CertKind, members: Sequence, cfg: Config,
                     registry: KeyRegistry | None = None) -> bool:
    """Structural (and, given a registry, cryptographic) certificate check."""
    members = tuple(members)
    if kind is CertKind.PREPARE_CERT:
        if len(members) != cfg.quorum or not isinstance(members[0], PrePrepare):
            return False
        pp = members[0]
        senders = {primary_of(pp.v, cfg)}
        for p in members[1:]:
            if not isinstance(p, Prepare) or (p.v, p.n, p.d) != (pp.v, pp.n, pp.d):
                return False
            if p.i in senders or p.i >= cfg.n:
                return False
            senders.add(p.i)
    else:
        cls = _MEMBER[kind]
        if len(members) != cfg.quorum or any(type(x) is not cls for x in members):
            return False
        keys = {_group_key(kind, x) for x in members}
        ids = [x.i for x in members]
        if len(keys) != 1 or len(set(ids)) != len(ids) or max(ids) >= cfg.n:
            return False
    if registry is not None:
        return all(verify_message(registry, x, cfg) for x in members)
    return True


def validate_certificate(cert: Certificate, cfg: Config, registry: KeyRegistry | None = None) -> bool:
    return cert.threshold == cfg.quorum and validate_members(cert.kind, cert.members, cfg, registry)


def validate_proof(proof: PreparedProof, cfg: Config, registry: KeyRegistry | None = None) -> bool:
    return validate_members(CertKind.PREPARE_CERT, (proof.preprepare,) + proof.prepares, cfg, registry)


def checkpoint_cert_valid(ckpt_n: int, cert: Sequence[Checkpoint], cfg: Config,
                          registry: KeyRegistry | None = None) -> bool:
    """The genesis checkpoint (n = 0) is proven by the empty certificate."""
    if ckpt_n == 0:
        return len(cert) == 0
    if ckpt_n % cfg.checkpoint_interval:
        return False
    return validate_members(CertKind.CHECKPOINT_CERT, cert, cfg, registry) and cert[0].n == ckpt_n
