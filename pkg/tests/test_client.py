import pytest

from compartbft.apps import get, put
from compartbft.client import Client, ClosedLoop, NoExecutionSession, Workload
from compartbft.config import Config, EnclaveId
from compartbft.crypto import ClusterKeys, EnclaveSession, client_mac, seal_reply
from compartbft.harness.cluster import SimCluster
from compartbft.messages import Reply, Request, decode
from compartbft.transport.simnet import Scheduler

from support import EXEC


class Rig:
    def __init__(self, retransmit=100):
        self.cfg = Config()
        self.keys = ClusterKeys.generate(self.cfg, clients=[0], seed=3)
        self.sched = Scheduler()
        self.wire = []
        self.client = Client(self.cfg, 0, self.keys.clients[0], self.keys.registry(),
                             send=lambda dest, data: self.wire.append((dest, data)), clock=self.sched, seed=9,
                             retransmit=retransmit)

    def reply(self, r, t, result, good_mac=True):
        s = self.client.session
        es = EnclaveSession(0, s.mac_keys[r], s.s_enc, s.encrypt)
        rep = Reply(0, t, 0, r, seal_reply(es, r, t, result))
        tag = client_mac(s.mac_keys[r] if good_mac else b"\x00" * 32, rep.body)
        return rep.with_auth(tag).wire


def test_request_sent_to_every_replica_with_mac_vector():
    rig = Rig()
    rig.client.submit(put(b"a", b"1"))
    assert [d for d, _ in rig.wire] == [("replica", r) for r in range(4)]
    req = decode(rig.wire[0][1])
    assert isinstance(req, Request) and len(req.auth) == 4 and req.t == 1
    assert b"a" not in req.op[1:]


def test_f_plus_one_matching_replies_complete():
    rig = Rig()
    done = []
    t = rig.client.submit(put(b"a", b"1"), done.append)
    rig.client.receive(("replica", 0), rig.reply(0, t, b"OK"))
    assert not done
    rig.client.receive(("replica", 0), rig.reply(0, t, b"OK"))
    assert not done
    rig.client.receive(("replica", 2), rig.reply(2, t, b"OK"))
    assert [op.result for op in done] == [b"OK"]


def test_conflicting_results_wait_for_a_majority():
    rig = Rig()
    t = rig.client.submit(get(b"a"))
    rig.client.receive(("replica", 0), rig.reply(0, t, b"NF"))
    rig.client.receive(("replica", 1), rig.reply(1, t, b"Vlie"))
    assert rig.client.outstanding == 1
    rig.client.receive(("replica", 2), rig.reply(2, t, b"NF"))
    assert rig.client.history.ops[0].result == b"NF"


def test_garbage_replies_tolerated():
    rig = Rig()
    t = rig.client.submit(get(b"a"))
    rig.client.receive(("replica", 0), b"\x00\x01junk")
    rig.client.receive(("replica", 1), rig.reply(1, t, b"NF", good_mac=False))
    rig.client.receive(("replica", 2), rig.reply(3, t, b"NF")[:-3] + b"xyz")
    assert rig.client.rejected_replies == 3 and rig.client.outstanding == 1


def test_late_duplicate_reply_ignored():
    rig = Rig()
    t = rig.client.submit(get(b"a"))
    for r in (0, 1):
        rig.client.receive(("replica", r), rig.reply(r, t, b"NF"))
    rig.client.receive(("replica", 2), rig.reply(2, t, b"Vother"))
    assert rig.client.history.ops[0].result == b"NF"
    assert len(rig.client.history.ops) == 1


def test_retransmission_with_backoff():
    rig = Rig(retransmit=100)
    rig.client.submit(get(b"a"))
    rig.sched.run(until=100)
    assert len(rig.wire) == 8
    rig.sched.run(until=299)
    assert len(rig.wire) == 8
    rig.sched.run(until=300)
    assert len(rig.wire) == 12
    assert rig.wire[0][1] == rig.wire[4][1]


def test_timestamps_strictly_increase():
    rig = Rig()
    ts = [rig.client.submit(get(b"a")) for _ in range(5)]
    assert ts == [1, 2, 3, 4, 5]


def test_honest_setup_has_all_sessions():
    cluster = SimCluster(Config(), clients=1, seed=1)
    assert sum(cluster.clients[0].attested.values()) == 8


def test_one_rejecting_enclave_leaves_the_rest():
    cluster = SimCluster(Config(), clients=1, seed=1, reject_attestation={EnclaveId(2, EXEC)})
    attested = cluster.clients[0].attested
    assert attested[(2, int(EXEC))] is False
    assert sum(attested.values()) == 7


def test_no_execution_session_is_fatal():
    with pytest.raises(NoExecutionSession):
        SimCluster(Config(), clients=1, seed=1, reject_attestation={EnclaveId(r, EXEC) for r in range(4)})


def test_closed_loop_keeps_outstanding():
    rig = Rig()
    loop = ClosedLoop(rig.client, Workload(seed=1), total=5, outstanding=3)
    loop.start()
    assert rig.client.outstanding == 3 and loop.issued == 3
    for t in (1, 2):
        for r in (0, 1):
            rig.client.receive(("replica", r), rig.reply(r, t, b"OK"))
    assert loop.completed == 2 and loop.issued == 5 and not loop.finished


def test_workload_is_seeded_and_marks_values():
    a = [Workload(seed=3, canary=b"@X:").next_op() for _ in range(1)]
    w1, w2 = Workload(seed=3, canary=b"@X:"), Workload(seed=3, canary=b"@X:")
    ops1 = [w1.next_op() for _ in range(50)]
    assert ops1 == [w2.next_op() for _ in range(50)]
    assert any(b"@X:" in op for op in ops1) and a[0] == ops1[0]


def test_end_to_end_in_simulation():
    cluster = SimCluster(Config(), clients=2, seed=4)
    loops = [ClosedLoop(c, Workload(seed=i), total=20, outstanding=2) for i, c in enumerate(cluster.clients)]
    for loop in loops:
        loop.start()
    cluster.run(until=20_000, stop=lambda: all(l.finished for l in loops))
    assert all(l.finished for l in loops)
    assert len(cluster.history.completed()) == 40
