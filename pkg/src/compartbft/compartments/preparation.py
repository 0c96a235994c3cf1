"""Preparation compartment: request intake, PrePrepare/Prepare, NewView construction."""
from __future__ import annotations

from collections import defaultdict

from ..config import CompartmentKind, in_window, primary_of
from ..crypto import verify_client_mac
from ..messages import (
    NewView, PrePrepare, Prepare, Request, ViewChange, describe,
)
from .base import (
    Compartment, Effects, RequestBatch, newview_matches, to_replica, newview_proof_valid, newview_reissue,
    valid_viewchange,
)

# pending requests kept per client; bounds what a chatty client can pin
MAX_PENDING_PER_CLIENT = 128


class Preparation(Compartment):
    KIND = CompartmentKind.PREPARATION

    def __init__(self, cfg, keys, registry):
        super().__init__(cfg, keys, registry)
        self.seqno = 0
        self.preprepares: dict[tuple[int, int], PrePrepare] = {}
        self.prepares: dict[tuple[int, int], Prepare] = {}
        self.requests: dict[tuple[int, int], Request] = {}
        self.ordered: dict[tuple[int, int], int] = {}
        self.viewchanges: dict[int, dict[int, ViewChange]] = defaultdict(dict)
        self.newviews: dict[int, NewView] = {}
        self.evidence: list[dict] = []
        self._handlers.update({
            RequestBatch: self.on_requests,
            Request: lambda r: self.on_requests(RequestBatch((r,))),
            PrePrepare: self.on_preprepare,
            ViewChange: self.on_viewchange,
            NewView: self.on_newview,
        })

    def has_new_view(self, v: int) -> bool:
        return v == 0 or v in self.newviews

    # (1) and (2): requests --------------------------------------------------

    def _authentic(self, req: Request) -> bool:
        session = self.sessions.get(req.c)
        if session is None or len(req.auth) <= self.replica:
            return False
        return verify_client_mac(session.mac_key, req.body, req.auth[self.replica])

    def on_requests(self, batch: RequestBatch) -> Effects:
        fx = Effects()
        for req in batch.requests:
            if not self._authentic(req):
                fx.note("bad_request_mac", c=req.c, t=req.t)
                continue
            if req.key in self.ordered or req.key in self.requests:
                continue
            self._store(req)
            if not self.is_primary():
                # backups hand fresh requests toward the primary
                fx.send(to_replica(primary_of(self.view, self.cfg)), req)
        if self.is_primary() and self.has_new_view(self.view):
            self._propose(fx)
        return fx

    def _store(self, req: Request) -> None:
        mine = sorted(k for k in self.requests if k[0] == req.c)
        if len(mine) >= MAX_PENDING_PER_CLIENT:
            del self.requests[mine[0]]
        self.requests[req.key] = req

    def _propose(self, fx: Effects) -> None:
        """Assign sequence numbers to pending requests while the window allows."""
        while self.requests:
            n = self.seqno + 1
            if not in_window(n, self.low_watermark, self.cfg):
                fx.backpressure = True
                fx.note("backpressure", n=n, low=self.low_watermark)
                return
            keys = sorted(self.requests)[: self.cfg.batch_max]
            batch = tuple(self.requests.pop(k) for k in keys)
            self.seqno = n
            pp = self._sign(PrePrepare(self.view, n, batch))
            self._log_preprepare(pp)
            fx.broadcast(pp)

    def _log_preprepare(self, pp: PrePrepare) -> None:
        self.preprepares[(pp.v, pp.n)] = pp
        for req in pp.batch:
            self.ordered[req.key] = pp.n
            self.requests.pop(req.key, None)

    def on_preprepare(self, pp: PrePrepare) -> Effects:
        fx = Effects()
        if not self._verified(pp, fx):
            return fx
        if primary_of(pp.v, self.cfg) == self.replica:
            return fx
        if pp.n <= self.low_watermark:
            fx.note("stale_drop", **describe(pp))
            return fx
        if pp.v != self.view or not self.has_new_view(pp.v) or not in_window(pp.n, self.low_watermark, self.cfg):
            fx.note("ignored", reason="not in view or window", **describe(pp))
            return fx
        known = self.preprepares.get((pp.v, pp.n))
        if known is not None:
            if known.d != pp.d:
                self._evidence(fx, "equivocation", v=pp.v, n=pp.n, digests=sorted([known.d.hex(), pp.d.hex()]))
            return fx
        self._log_preprepare(pp)
        self._prepare(pp, fx)
        return fx

    def _prepare(self, pp: PrePrepare, fx: Effects) -> None:
        if (pp.v, pp.n) in self.prepares:
            return
        p = self._sign(Prepare(pp.v, pp.n, pp.d, self.replica))
        self.prepares[(pp.v, pp.n)] = p
        fx.broadcast(p)

    def _evidence(self, fx: Effects, kind: str, **fields) -> None:
        self.evidence.append({"kind": kind, **fields})
        fx.note(kind, **fields)

    # (6) and (7): view change ---------------------------------------------

    def on_viewchange(self, vc: ViewChange) -> Effects:
        fx = Effects()
        if vc.new_view < self.view or (vc.new_view == self.view and self.has_new_view(vc.new_view)):
            fx.note("stale_drop", **describe(vc))
            return fx
        if not valid_viewchange(vc, self.cfg, self.registry):
            self._evidence(fx, "invalid_viewchange", new_view=vc.new_view, i=vc.i)
            return fx
        self.viewchanges[vc.new_view].setdefault(vc.i, vc)
        v = vc.new_view
        if self.is_primary(v) and v not in self.newviews and len(self.viewchanges[v]) >= self.cfg.quorum:
            fx.extend(self._issue_newview(v))
        return fx

    def _issue_newview(self, v: int) -> Effects:
        senders = sorted(self.viewchanges[v])[: self.cfg.quorum]
        vcs = tuple(self.viewchanges[v][i] for i in senders)
        min_s, entries = newview_reissue(vcs)
        pps = tuple(self._sign(PrePrepare(v, n, batch)) for n, batch in entries)
        best = max(vcs, key=lambda vc: (vc.ckpt_n, -vc.i))
        nv = self._sign(NewView(v, vcs, pps, best.ckpt_cert))
        fx = Effects()
        fx.broadcast(nv)
        fx.note("newview_issued", v=v, min_s=min_s, reissued=len(pps))
        self._adopt(nv, fx, primary=True)
        self._propose(fx)
        return fx

    def on_newview(self, nv: NewView) -> Effects:
        fx = Effects()
        if primary_of(nv.v, self.cfg) == self.replica:
            return fx
        if nv.v < self.view or nv.v in self.newviews:
            fx.note("stale_drop", **describe(nv))
            return fx
        if not newview_proof_valid(nv, self.cfg, self.registry):
            self._evidence(fx, "newview_invalid", v=nv.v)
            return fx
        if not self.accepts_reissue(nv):
            self._evidence(fx, "newview_rejected", v=nv.v)
            return fx
        self._adopt(nv, fx, primary=False)
        return fx

    def accepts_reissue(self, nv: NewView) -> bool:
        """Recompute the re-issued PrePrepares and compare with the received ones."""
        return newview_matches(nv)

    def _adopt(self, nv: NewView, fx: Effects, primary: bool) -> None:
        self.view = nv.v
        self.newviews[nv.v] = nv
        self._apply_newview_checkpoint(nv, fx)
        self.ordered = {}
        for pp in nv.preprepares:
            if pp.n > self.low_watermark:
                self._log_preprepare(pp)
        self.seqno = max([self.low_watermark] + [pp.n for pp in nv.preprepares])
        for v in [v for v in self.viewchanges if v <= nv.v]:
            del self.viewchanges[v]
        for v in [v for v in self.newviews if v < nv.v]:
            del self.newviews[v]
        fx.note("newview_accepted", v=nv.v, ckpt_n=nv.ckpt_n, reissued=len(nv.preprepares))
        if not primary:
            for pp in nv.preprepares:
                if pp.n > self.low_watermark and in_window(pp.n, self.low_watermark, self.cfg):
                    self._prepare(pp, fx)

    # (9): garbage collection ----------------------------------------------

    def on_checkpoint_cert(self, members) -> Effects:
        fx = super().on_checkpoint_cert(members)
        if self.seqno < self.low_watermark:
            self.seqno = self.low_watermark
        if fx and self.is_primary() and self.has_new_view(self.view):
            self._propose(fx)
        return fx

    def collect_garbage(self, n: int) -> None:
        for key in [k for k in self.preprepares if k[1] <= n]:
            del self.preprepares[key]
        for key in [k for k in self.prepares if k[1] <= n]:
            del self.prepares[key]
        for key in [k for k, seq in self.ordered.items() if seq <= n]:
            del self.ordered[key]

    def log_seqnos(self) -> list[int]:
        out = super().log_seqnos()
        out += [k[1] for k in self.preprepares] + [k[1] for k in self.prepares]
        for vcs in self.viewchanges.values():
            for vc in vcs.values():
                out += [p.n for p in vc.prepare_certs]
        return out

    def logged_messages(self) -> list:
        out = super().logged_messages()
        out += list(self.preprepares.values()) + list(self.prepares.values()) + list(self.requests.values())
        for vcs in self.viewchanges.values():
            out += list(vcs.values())
        out += list(self.newviews.values())
        return out
