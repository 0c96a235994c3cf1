from collections import Counter

from compartbft.harness.checkers import (
    LeakScanner, check_agreement, check_view_change, emission_pattern, exec_records_from_trace,
)
from compartbft.harness.cluster import ExecRecord


def rec(executed, checkpoints=None):
    return ExecRecord(executed=dict(executed), checkpoints=dict(checkpoints or {}))


def test_agreement_on_prefixes():
    records = {0: rec({1: "a", 2: "b"}), 1: rec({1: "a"}), 2: rec({1: "a", 2: "b", 3: "c"})}
    res = check_agreement(records, [0, 1, 2])
    assert res and res.checked == 3


def test_divergence_names_lowest_sequence():
    records = {0: rec({1: "a", 2: "b", 3: "c"}), 1: rec({1: "a", 2: "x", 3: "y"})}
    res = check_agreement(records, [0, 1])
    assert not res and res.witness["n"] == 2 and res.witness["replicas"] == {0: "b", 1: "x"}


def test_faulty_replicas_excluded():
    records = {0: rec({1: "a"}), 1: rec({1: "evil"})}
    assert check_agreement(records, [0])


def test_state_divergence_detected():
    records = {0: rec({}, {100: "s1"}), 1: rec({}, {100: "s2"})}
    res = check_agreement(records, [0, 1])
    assert not res and res.witness["what"] == "state"


def test_records_from_trace():
    trace = [{"kind": "enclave", "enclave": "exec", "replica": 1, "event": "executed", "n": 1, "d": "a"},
             {"kind": "enclave", "enclave": "prep", "replica": 1, "event": "executed", "n": 9, "d": "z"}]
    assert exec_records_from_trace(trace)[1].executed == {1: "a"}


def test_leak_scanner():
    s = LeakScanner([b"@CNRY:"], [b"\x07" * 32])
    s.scan("clean", b"ciphertext")
    assert s.report()
    s.scan("frame", b"xx@CNRY:0001")
    s.scan("disk", b"\x07" * 40)
    rep = s.report()
    assert not rep and rep.sites == ["canary in frame", "secret in disk"] and rep.scanned == 3


def test_emission_patterns():
    assert emission_pattern(Counter({("prep", "Prepare", 1): 2, ("conf", "Commit", 1): 2}), 1) == "both"
    assert emission_pattern(Counter({("conf", "Commit", 1): 1}), 1) == "commits_only"
    assert emission_pattern(Counter({("prep", "Prepare", 0): 1}), 1) == "neither"


def _rejected(r, v):
    return {"kind": "enclave", "enclave": "prep", "event": "newview_rejected", "replica": r, "v": v}


def test_view_change_checker():
    both = Counter({("prep", "Prepare", 1): 1, ("conf", "Commit", 1): 1})
    commits = Counter({("conf", "Commit", 1): 1})
    sent = {0: both, 2: both, 3: commits}
    assert check_view_change([_rejected(3, 1)], sent, 1, [0, 2, 3], primary=1)
    # a replica that rejected yet prepared is flagged
    bad = check_view_change([_rejected(3, 1)], {3: both}, 1, [3], primary=1)
    assert not bad and "replica 3" in bad.reason
    # and one that accepted but only committed
    assert not check_view_change([], {2: commits}, 1, [2], primary=1)
    # no NewView at all: neither
    assert check_view_change([], {2: Counter()}, 1, [2], primary=1)
