"""Confirmation compartment: prepare certificates, Commits and ViewChange messages."""
from __future__ import annotations

from collections import defaultdict

from ..certificates import CertKind, assemble_certificate
from ..config import CompartmentKind, in_window, primary_of
from ..messages import (
    Commit, NewView, PreparedProof, PrePrepare, Prepare, ViewChange, describe,
)
from .base import Compartment, Effects, ViewChangeTrigger, newview_proof_valid

# distinct digests remembered per (v, n); only a faulty primary produces more than one
MAX_DIGESTS_PER_SLOT = 4


class Confirmation(Compartment):
    KIND = CompartmentKind.CONFIRMATION

    def __init__(self, cfg, keys, registry):
        super().__init__(cfg, keys, registry)
        self.preprepares: dict[tuple[int, int], dict[bytes, PrePrepare]] = defaultdict(dict)
        self.prepares: dict[tuple[int, int, bytes], dict[int, Prepare]] = defaultdict(dict)
        self.commits: dict[tuple[int, int], Commit] = {}
        self.proofs: dict[int, PreparedProof] = {}
        self.sent_viewchanges: dict[int, ViewChange] = {}
        self.evidence: list[dict] = []
        self._handlers.update({
            PrePrepare: self.on_preprepare,
            Prepare: self.on_prepare,
            ViewChangeTrigger: self.on_trigger,
            NewView: self.on_newview,
        })

    def _admissible(self, msg, fx: Effects) -> bool:
        if not self._verified(msg, fx):
            return False
        if msg.n <= self.low_watermark:
            fx.note("stale_drop", **describe(msg))
            return False
        if msg.v < self.view or not in_window(msg.n, self.low_watermark, self.cfg):
            fx.note("ignored", reason="not in view or window", **describe(msg))
            return False
        return True

    # (3): prepare certificate -> Commit ------------------------------------

    def on_preprepare(self, pp: PrePrepare) -> Effects:
        fx = Effects()
        if self._admissible(pp, fx):
            self._log_preprepare(pp)
            self._try_commit(pp.v, pp.n, pp.d, fx)
        return fx

    def _log_preprepare(self, pp: PrePrepare) -> None:
        slot = self.preprepares[(pp.v, pp.n)]
        if pp.d not in slot and len(slot) < MAX_DIGESTS_PER_SLOT:
            slot[pp.d] = pp

    def on_prepare(self, p: Prepare) -> Effects:
        fx = Effects()
        if not self._admissible(p, fx):
            return fx
        if p.i == primary_of(p.v, self.cfg):
            fx.note("ignored", reason="prepare from primary", **describe(p))
            return fx
        self.prepares[(p.v, p.n, p.d)].setdefault(p.i, p)
        self._try_commit(p.v, p.n, p.d, fx)
        return fx

    def _try_commit(self, v: int, n: int, d: bytes, fx: Effects) -> None:
        if v < self.view or (v, n) in self.commits:
            return
        pp = self.preprepares.get((v, n), {}).get(d)
        prepares = self.prepares.get((v, n, d), {})
        if pp is None or len(prepares) < 2 * self.cfg.f:
            return
        cert = assemble_certificate(CertKind.PREPARE_CERT, [pp, *prepares.values()], self.cfg)
        held = self.proofs.get(n)
        if held is None or held.v <= v:
            self.proofs[n] = cert.as_proof()
        commit = self._sign(Commit(v, n, d, self.replica))
        self.commits[(v, n)] = commit
        self.view = max(self.view, v)
        fx.broadcast(commit)

    # (5): view-change trigger ----------------------------------------------

    def on_trigger(self, trig: ViewChangeTrigger) -> Effects:
        fx = Effects()
        if trig.suspected_view != self.view:
            fx.note("stale_trigger", suspected=trig.suspected_view, view=self.view)
            return fx
        proofs = tuple(self.proofs[n] for n in sorted(self.proofs) if n > self.low_watermark)
        vc = self._sign(ViewChange(self.view + 1, self.low_watermark, self.stable_ckpt_cert, proofs, self.replica))
        self.sent_viewchanges[vc.new_view] = vc
        self.view += 1
        fx.broadcast(vc)
        fx.note("viewchange_sent", new_view=vc.new_view, ckpt_n=vc.ckpt_n, proofs=len(proofs))
        return fx

    # NewView synchronisation -----------------------------------------------

    def on_newview(self, nv: NewView) -> Effects:
        fx = Effects()
        if nv.v < self.view:
            fx.note("stale_drop", **describe(nv))
            return fx
        if not newview_proof_valid(nv, self.cfg, self.registry):
            self.evidence.append({"kind": "newview_invalid", "v": nv.v})
            fx.note("newview_invalid", v=nv.v)
            return fx
        self.view = nv.v
        self._apply_newview_checkpoint(nv, fx)
        for pp in nv.preprepares:
            if pp.n > self.low_watermark and in_window(pp.n, self.low_watermark, self.cfg):
                self._log_preprepare(pp)
                self._try_commit(pp.v, pp.n, pp.d, fx)
        fx.note("newview_synced", v=nv.v)
        return fx

    # (9) --------------------------------------------------------------------

    def collect_garbage(self, n: int) -> None:
        for key in [k for k in self.preprepares if k[1] <= n]:
            del self.preprepares[key]
        for key in [k for k in self.prepares if k[1] <= n]:
            del self.prepares[key]
        for key in [k for k in self.commits if k[1] <= n]:
            del self.commits[key]
        for key in [k for k in self.proofs if k <= n]:
            del self.proofs[key]
        for v in [v for v in self.sent_viewchanges if v < self.view]:
            del self.sent_viewchanges[v]

    def log_seqnos(self) -> list[int]:
        out = super().log_seqnos()
        out += [k[1] for k, slot in self.preprepares.items() if slot]
        out += [k[1] for k, slot in self.prepares.items() if slot]
        out += [k[1] for k in self.commits] + list(self.proofs)
        return out

    def logged_messages(self) -> list:
        out = super().logged_messages()
        for slot in self.preprepares.values():
            out += list(slot.values())
        for slot in self.prepares.values():
            out += list(slot.values())
        out += list(self.commits.values()) + list(self.proofs.values()) + list(self.sent_viewchanges.values())
        return out
