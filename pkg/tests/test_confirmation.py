import itertools

import pytest

from compartbft.compartments.base import ViewChangeTrigger
from compartbft.messages import Commit, NewView, ViewChange

from support import CONF, PREP, Bed, notes, sent

D0 = b"\x00" * 32


@pytest.fixture
def bed():
    return Bed()


def _prepare_cert(bed, c, n, batch=()):
    pp = bed.preprepare(0, n, batch)
    fx = c.handle(pp)
    for i in (1, 2):
        fx.extend(c.handle(bed.prepare(0, n, pp.d, i)))
    return pp, fx


def test_commit_after_prepare_certificate(bed):
    c = bed.enclave(3, CONF)
    pp, fx = _prepare_cert(bed, c, 1)
    (cm,) = sent(fx, Commit)
    assert (cm.v, cm.n, cm.d, cm.i) == (0, 1, pp.d, 3)


def test_no_commit_without_preprepare(bed):
    c = bed.enclave(3, CONF)
    fx = c.handle(bed.prepare(0, 1, D0, 1))
    fx.extend(c.handle(bed.prepare(0, 1, D0, 2)))
    assert not sent(fx, Commit)


def test_prepare_order_does_not_matter(bed):
    c = bed.enclave(3, CONF)
    pp = bed.preprepare(0, 1)
    c.handle(bed.prepare(0, 1, pp.d, 1))
    c.handle(bed.prepare(0, 1, pp.d, 2))
    assert sent(c.handle(pp), Commit)


def test_single_commit_per_slot(bed):
    c = bed.enclave(3, CONF)
    pp, _ = _prepare_cert(bed, c, 1)
    assert not sent(c.handle(bed.prepare(0, 1, pp.d, 3)), Commit)
    assert not sent(c.handle(pp), Commit)


def test_digest_split_enumeration():
    """Every split of backup Prepares over two digests, both PrePrepares present."""
    bed = Bed()
    batches = {"A": (), "B": (bed.request(),)}
    pps = {k: bed.preprepare(0, 1, b) for k, b in batches.items()}
    for combo in itertools.product([None, "A", "B"], repeat=3):
        c = bed.enclave(2, CONF)
        fx = c.handle(pps["A"]).extend(c.handle(pps["B"]))
        for i, label in zip((1, 2, 3), combo):
            if label:
                fx.extend(c.handle(bed.prepare(0, 1, pps[label].d, i)))
        counts = {k: combo.count(k) for k in "AB"}
        expected = [k for k in "AB" if counts[k] >= 2]
        got = [cm.d for cm in sent(fx, Commit)]
        assert got == [pps[k].d for k in expected][:1]


def test_trigger_sends_viewchange_with_certificates(bed):
    c = bed.enclave(3, CONF)
    p1, _ = _prepare_cert(bed, c, 1)
    p2, _ = _prepare_cert(bed, c, 2, (bed.request(),))
    fx = c.handle(ViewChangeTrigger(0))
    (vc,) = sent(fx, ViewChange)
    assert vc.new_view == 1 and vc.ckpt_n == 0 and vc.ckpt_cert == ()
    assert [(p.n, p.d) for p in vc.prepare_certs] == [(1, p1.d), (2, p2.d)]
    assert c.view == 1


def test_viewchange_carries_stable_checkpoint(bed):
    c = bed.enclave(3, CONF)
    c.on_checkpoint_cert(bed.ckpt_cert(100, D0))
    (vc,) = sent(c.handle(ViewChangeTrigger(0)), ViewChange)
    assert vc.ckpt_n == 100 and len(vc.ckpt_cert) == 3


def test_stale_trigger_ignored(bed):
    c = bed.enclave(3, CONF)
    c.handle(ViewChangeTrigger(0))
    fx = c.handle(ViewChangeTrigger(0))
    assert not fx.out and notes(fx, "stale_trigger")


def test_old_view_prepare_not_processed_after_viewchange(bed):
    c = bed.enclave(3, CONF)
    pp = bed.preprepare(0, 1)
    c.handle(pp)
    c.handle(bed.prepare(0, 1, pp.d, 1))
    c.handle(ViewChangeTrigger(0))
    fx = c.handle(bed.prepare(0, 1, pp.d, 2))
    assert not sent(fx, Commit) and notes(fx, "ignored")


def _newview(bed, v=1, preprepares=None, ckpt_n=0):
    vcs = [bed.viewchange(v, i, ckpt_n=ckpt_n, ckpt_d=D0) for i in (0, 1, 2)]
    return bed.newview(v, vcs, preprepares=preprepares)


def test_newview_with_forged_reissue_still_adopted(bed):
    forged = _newview(bed, preprepares=(bed.preprepare(1, 1, (bed.request(),)),))
    c = bed.enclave(3, CONF)
    fx = c.handle(forged)
    assert c.view == 1 and notes(fx, "newview_synced")


def test_newview_for_current_view_applies_checkpoint(bed):
    c = bed.enclave(3, CONF)
    c.handle(_newview(bed))
    c.handle(_newview(bed, ckpt_n=100))
    assert c.view == 1 and c.low_watermark == 100


def test_commit_in_new_view_after_newview(bed):
    c = bed.enclave(3, CONF)
    nv = _newview(bed, preprepares=(bed.preprepare(1, 1),))
    c.handle(nv)
    pp = nv.preprepares[0]
    fx = c.handle(bed.prepare(1, 1, pp.d, 0)).extend(c.handle(bed.prepare(1, 1, pp.d, 2)))
    (cm,) = sent(fx, Commit)
    assert cm.v == 1


def _mutations(bed, nv):
    vcs = nv.viewchanges
    yield "dropped viewchange", NewView(nv.v, vcs[:2], nv.preprepares, nv.ckpt_cert)
    yield "duplicate sender", NewView(nv.v, (vcs[0], vcs[0], vcs[1]), nv.preprepares, nv.ckpt_cert)
    bad_sig = ViewChange(vcs[0].new_view, 0, (), (), vcs[0].i, b"\x01" * 64)
    yield "forged viewchange", NewView(nv.v, (bad_sig,) + vcs[1:], nv.preprepares, nv.ckpt_cert)
    other = tuple(bed.viewchange(2, i) for i in (0, 1, 2))
    yield "wrong view", NewView(nv.v, other, nv.preprepares, nv.ckpt_cert)
    yield "missing checkpoint", NewView(nv.v, vcs, nv.preprepares, ())
    yield "bad outer signature", nv.with_auth(b"\x02" * 64)


def test_newview_proof_mutation_sweep():
    bed = Bed()
    nv = _newview(bed, ckpt_n=100)
    for label, bad in _mutations(bed, nv):
        if label != "bad outer signature":
            bad = bed.sign(1, PREP, bad)
        c = bed.enclave(3, CONF)
        c.handle(bad)
        assert c.view == 0, label
    c = bed.enclave(3, CONF)
    c.handle(nv)
    assert c.view == 1


def test_gc_triple(bed):
    c = bed.enclave(3, CONF)
    for n in (1, 2, 101):
        _prepare_cert(bed, c, n)
    c.on_checkpoint_cert(bed.ckpt_cert(100, D0))
    assert sorted(set(c.log_seqnos())) == [101]
    assert not c.on_checkpoint_cert(bed.ckpt_cert(100, D0))
    fx = c.handle(bed.prepare(0, 50, D0, 1))
    assert notes(fx, "stale_drop")


def test_viewchange_is_complete():
    bed = Bed()
    c = bed.enclave(3, CONF)
    for n in range(1, 6):
        _prepare_cert(bed, c, n)
    held = {n: p.d for n, p in c.proofs.items()}
    (vc,) = sent(c.handle(ViewChangeTrigger(0)), ViewChange)
    assert {p.n: p.d for p in vc.prepare_certs} == held
