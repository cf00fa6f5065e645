import pytest

from conftest import traced_net
from mrpaxos.core import Tuning, simple_cluster
from mrpaxos.messages import Ballot, Decision, Message, Phase2Message, ProposedValue
from mrpaxos.recovery import StableLog
from mrpaxos.ring import Acceptor, OversizeValue
from mrpaxos.storage import MemDisk
from mrpaxos.transport.codec import MsgType
from mrpaxos.transport.simnet import SimNet


def sends_after(net, start, msg_type):
    return [e for e in net.trace[start:] if e[1] == "send" and e[4] == int(msg_type)]


@pytest.mark.parametrize("proposer, hops", [(3, 1), (2, 2), (0, 0)])
def test_proposal_hops_to_coordinator(quiet_ring, proposer, hops):
    net = traced_net(quiet_ring)
    net.run_until(50)
    mark = len(net.trace)
    net.inject(0, 100, pid=proposer)
    net.run_until(100)
    assert len(sends_after(net, mark, MsgType.PROPOSE)) == hops
    assert len([e for e in net.trace[mark:] if e[1] == "assign"]) == 1


def test_phase2_votes_accumulate_and_last_acceptor_decides(quiet_ring):
    net = traced_net(quiet_ring)
    net.run_until(50)
    mark = len(net.trace)
    net.inject(0, 100, pid=0)
    net.run_until(100)
    p2 = sends_after(net, mark, MsgType.PHASE2)
    assert [(e[2], e[3]) for e in p2] == [(0, 1), (1, 2)]
    (dec,) = [e for e in net.trace[mark:] if e[1] == "decide"]
    assert dec[2] == 2


def test_decision_forwarded_three_times_in_ring_of_four(quiet_ring):
    net = traced_net(quiet_ring)
    net.run_until(50)
    mark = len(net.trace)
    net.inject(0, 100, pid=1)
    net.run_until(100)
    d = sends_after(net, mark, MsgType.DECISION)
    assert [(e[2], e[3]) for e in d] == [(2, 3), (3, 0), (0, 1)]


def test_first_instance_is_zero_and_idle_ring_sends_nothing(quiet_ring):
    net = traced_net(quiet_ring)
    net.run_until(50)
    assert net.trace.of("assign") == []
    mark = len(net.trace)
    net.run_until(80)
    assert sends_after(net, mark, MsgType.PHASE2) == []
    net.inject(0, 10)
    net.run_until(100)
    assert net.trace.of("assign")[0][4] == 0


def test_small_commands_batched_into_one_instance(quiet_ring):
    net = SimNet(quiet_ring, 1)
    # queued before phase 1 completes, so both wait for the same assignment
    node = net.nodes[0]
    node.multicast(0, b"a" * 100)
    node.multicast(0, b"b" * 100)
    node.flush()
    net.run_until(50)
    assigns = net.trace.of("assign")
    assert len(assigns) == 1
    assert len(net.trace.of("deliver")) == 2
    assert {e[3] for e in net.trace.of("deliver")} == {0}
    assert [e[4] for e in net.trace.of("deliver")] == [0, 0]


def test_oversize_rejected_locally():
    cfg = simple_cluster(1, {3: [0]}, tuning=Tuning(batch_limit=1000, rate_leveling=False))
    net = traced_net(cfg)
    net.run_until(20)
    mark = len(net.trace)
    with pytest.raises(OversizeValue):
        net.nodes[2].multicast(0, b"x" * 1001)
    net.run_until(40)
    assert sends_after(net, mark, MsgType.PROPOSE) == []


def test_learner_forwards_phase2_unchanged():
    # learner placed between acceptors: 0 1 3 2
    from mrpaxos.core import parse_config
    cfg = parse_config("""
[ring 0]
members = 0 1 3 2
acceptors = 0 1 2
coordinator = 0
[process 0]
roles = acceptor proposer
[process 1]
roles = acceptor proposer
[process 2]
roles = acceptor proposer
[process 3]
roles = learner
subscriptions = 0
[tuning]
rate_leveling = false
""")
    net = SimNet(cfg, 1)
    net.run_until(20)
    seen = []
    orig = net.nodes[2].deliver

    def spy(src, env):
        if env.msg_type == MsgType.PHASE2:
            seen.append((src, Phase2Message.decode(env.payload).votes))
        orig(src, env)
    net.nodes[2].deliver = spy
    net.inject(0, 50, pid=0)
    net.run_until(60)
    assert seen == [(3, 2)]
    assert len(net.trace.of("deliver")) == 1


def acceptor():
    return Acceptor(StableLog(MemDisk()), 100)


def v(tag):
    return ProposedValue.app([Message(1, tag, b"p")])


def test_stale_ballot_gets_no_vote():
    from mrpaxos.messages import Phase1Message
    acc = acceptor()
    acc.on_phase1(Phase1Message(Ballot(5, 0), 0, 100))
    m = Phase2Message(0, Ballot(4, 0), v(1), 1)
    assert acc.on_phase2(m) is m
    assert 0 not in acc.votes


def test_higher_ballot_phase1_fences_old_coordinator():
    from mrpaxos.messages import Phase1Message
    acc = acceptor()
    acc.on_phase1(Phase1Message(Ballot(1, 0), 0, 100))
    assert acc.on_phase2(Phase2Message(0, Ballot(1, 0), v(1), 1)).votes == 2
    out = acc.on_phase1(Phase1Message(Ballot(2, 1), 0, 100))
    assert out.promises == 1 and out.accepted[0][0] == 0
    assert acc.on_phase2(Phase2Message(1, Ballot(1, 0), v(2), 1)).votes == 1
    assert acc.on_phase1(Phase1Message(Ballot(1, 0), 0, 100)).promises == 0


def test_duplicate_decision_is_ignored():
    acc = acceptor()
    d = Decision(0, Ballot(1, 0), v(1))
    acc.on_decision(d)
    size = acc.log.disk.size("acceptor.log")
    acc.on_decision(d)
    assert acc.log.disk.size("acceptor.log") == size
    assert acc.frontier == 1


def test_duplicate_decision_replay_leaves_delivery_unchanged(quiet_ring):
    from mrpaxos.transport.codec import Envelope
    net = SimNet(quiet_ring, 3)
    net.run_until(10)
    net.inject(0, 40)
    net.run_until(40)
    before = net.delivered(3)
    ballot, value = net.nodes[0].rings[0].acceptor.votes[0]
    env = Envelope(MsgType.DECISION, 0, 2, Decision(0, ballot, value).encode())
    net.nodes[3].deliver(2, env)
    net.nodes[3].flush()
    net.run_until(60)
    assert net.delivered(3) == before == [e[6] for e in net.trace.of("deliver")]


def test_phase1_window_extended_before_exhaustion():
    cfg = simple_cluster(1, {3: [0]}, tuning=Tuning(phase1_window=16, rate_leveling=False))
    net = SimNet(cfg, 2)
    net.run_until(10)
    for i in range(40):
        net.call_at(10 + i * 0.5, lambda: net.inject(0, 32))
    net.run_until(200)
    windows = [(e[5], e[6]) for e in net.trace.of("phase1")]
    assert windows[:3] == [(0, 16), (16, 32), (32, 48)]
    assert len(net.trace.of("deliver")) == 40
    extends = [e[0] for e in net.trace.of("phase1")][1]
    # requested once a quarter of the window remains, before instance 12 is assigned
    thirteenth = sorted(e[0] for e in net.trace.of("assign"))[12]
    assert extends <= thirteenth
