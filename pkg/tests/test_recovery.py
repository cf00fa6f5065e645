import pytest

from mrpaxos.messages import RT_END, RT_TRIMMED, Ballot, Decision, Message, ProposedValue
from mrpaxos.multiring import MergeCursor
from mrpaxos.recovery import (
    Checkpoint,
    CheckpointStore,
    ProtocolViolation,
    StableLog,
    chunk,
    compare_ids,
    compute_trim_point,
    decide_trim,
    decode_records,
    max_id,
    model_check_recovery,
    satisfies_merge_order,
    select_recovery_source,
    take_checkpoint,
    trim_quorum_complete,
)
from mrpaxos.ring import Acceptor
from mrpaxos.storage import MemDisk

B = Ballot(1, 0)


def val(i):
    return ProposedValue.app([Message(9, i, b"v%d" % i)])


# --- checkpoint ids ---------------------------------------------------------------

def test_checkpoint_id_follows_cursor():
    cur = MergeCursor([1, 2], 1)
    # instance 7 of group 1 and 6 of group 2 consumed
    for _ in range(15):
        cur.advance()
    ck = take_checkpoint(b"state", cur)
    assert ck.id == ((1, 7), (2, 6))
    assert satisfies_merge_order(ck.id)


def test_single_group_id_is_one_tuple():
    cur = MergeCursor([4], 1)
    cur.advance()
    assert take_checkpoint(b"", cur).id == ((4, 0),)


def test_later_checkpoints_dominate_earlier():
    cur = MergeCursor([0, 1, 2], 2)
    ids = []
    for _ in range(20):
        cur.advance()
        ids.append(cur.checkpoint_id())
    for a, b in zip(ids, ids[1:]):
        assert compare_ids(a, b) == -1


def test_merge_order_predicate():
    assert satisfies_merge_order(((1, 7), (2, 6)))
    assert not satisfies_merge_order(((1, 5), (2, 6)))


def test_compare_and_max():
    assert compare_ids(((1, 7), (2, 6)), ((1, 9), (2, 8))) == -1
    assert compare_ids(((1, 9), (2, 8)), ((1, 9), (2, 8))) == 0
    assert compare_ids(((1, 9), (2, 6)), ((1, 8), (2, 7))) is None
    with pytest.raises(ProtocolViolation):
        compare_ids(((1, 0),), ((2, 0),))
    with pytest.raises(ProtocolViolation):
        max_id([((1, 9), (2, 6)), ((1, 8), (2, 7))])


# --- trimming ----------------------------------------------------------------------

def test_trim_point_is_quorum_minimum():
    assert compute_trim_point({0: 10, 1: 12}) == 10
    assert compute_trim_point({0: 7, 1: 7, 2: 7}) == 7
    d = decide_trim(3, {4: 12, 5: 10})
    assert d.group == 3 and d.trim_point == 10 and set(d.quorum) == {4, 5}
    with pytest.raises(ValueError):
        compute_trim_point({})


def test_trim_quorum_needs_majority_of_every_partition():
    parts = [{3, 4, 5}, {6, 7, 8}]
    assert not trim_quorum_complete({3: 1, 4: 1, 6: 1}, parts)
    assert trim_quorum_complete({3: 1, 4: 1, 6: 1, 8: 1}, parts)


# --- recovery source --------------------------------------------------------------

def test_recovery_picks_maximal_tuple():
    k, src = select_recovery_source({3: ((1, 7), (2, 6)), 4: ((1, 9), (2, 8))})
    assert k == ((1, 9), (2, 8)) and src == 4


def test_recovery_ties_prefer_lowest_pid():
    k, src = select_recovery_source({5: ((0, 3),), 4: ((0, 3),), 6: ((0, 1),)})
    assert src == 4


def test_incomparable_responses_are_fatal():
    with pytest.raises(ProtocolViolation):
        select_recovery_source({3: ((1, 9), (2, 6)), 4: ((1, 8), (2, 7))})


# --- checkpoint files ---------------------------------------------------------------

def test_checkpoint_roundtrip_and_digest():
    ck = Checkpoint(((0, 5), (1, 4)), b"state bytes")
    data = ck.encode()
    assert data[:4] == b"MRCK"
    assert Checkpoint.decode(data) == ck
    bad = data[:-1] + bytes([data[-1] ^ 1])
    with pytest.raises(ValueError, match="digest"):
        Checkpoint.decode(bad)


def test_checkpoint_store_survives_reopen_and_ignores_garbage():
    disk = MemDisk()
    store = CheckpointStore(disk)
    assert store.latest is None
    ck = Checkpoint(((0, 1),), b"abc")
    store.save(ck)
    disk.crash()
    assert CheckpointStore(disk).latest == ck
    disk.replace("checkpoint", b"MRCKjunk")
    assert CheckpointStore(disk).latest is None


def test_chunking():
    assert chunk(b"abcdefg", 3) == [b"abc", b"def", b"g"]
    assert chunk(b"", 3) == [b""]


# --- stable log -----------------------------------------------------------------------

def test_stable_log_replays_votes_and_promise():
    disk = MemDisk()
    sl = StableLog(disk)
    sl.promise(0, 100, B)
    sl.vote(0, B, val(0))
    sl.vote(1, B, val(1))
    sl.decide(0, B)
    sl.sync()
    st = StableLog(disk).load()
    assert st.promised == B and st.window_end == 100
    assert set(st.votes) == {0, 1} and st.decided == {0}


def test_torn_tail_discarded():
    disk = MemDisk()
    sl = StableLog(disk)
    sl.vote(0, B, val(0))
    sl.sync()
    good = disk.size("acceptor.log")
    disk.append("acceptor.log", b"\x00\x00\x04\x00\x02\x00\x00")
    recs, valid = decode_records(disk.read("acceptor.log"))
    assert len(recs) == 1 and valid == good
    st = StableLog(disk).load()
    assert set(st.votes) == {0}
    assert disk.size("acceptor.log") == good


def test_unsynced_votes_lost_on_crash():
    disk = MemDisk()
    sl = StableLog(disk, mode="async")
    sl.vote(0, B, val(0))
    sl.sync()
    disk.crash()
    assert StableLog(disk).load().votes == {}


def test_acceptor_restart_keeps_vote():
    disk = MemDisk()
    acc = Acceptor(StableLog(disk), 100)
    from mrpaxos.messages import Phase1Message, Phase2Message
    acc.on_phase1(Phase1Message(B, 0, 100))
    out = acc.on_phase2(Phase2Message(0, B, val(0), 1))
    assert out.votes == 2
    acc.log.sync()
    disk.crash()
    again = Acceptor(StableLog(disk), 100)
    # a different value in the same instance and ballot gets no vote
    other = Phase2Message(0, B, val(99), 1)
    assert again.on_phase2(other).votes == 1


# --- retransmission boundaries --------------------------------------------------------

def decided_acceptor(n):
    acc = Acceptor(StableLog(MemDisk()), 1000)
    for i in range(n):
        acc.on_decision(Decision(i, B, val(i)))
    return acc


def test_serve_above_trim_point():
    acc = decided_acceptor(30)
    assert acc.trim(10)
    out, status = acc.serve(11, 20)
    assert [d.instance for d in out] == list(range(11, 21))
    assert status == (RT_END, 21)


def test_serve_below_trim_point_is_trimmed():
    acc = decided_acceptor(30)
    acc.trim(10)
    out, status = acc.serve(5, 20)
    assert out == [] and status == (RT_TRIMMED, 10)
    assert not acc.trim(10)


def test_trim_persists():
    disk = MemDisk()
    acc = Acceptor(StableLog(disk), 1000)
    for i in range(5):
        acc.on_decision(Decision(i, B, val(i)))
    acc.trim(2)
    again = Acceptor(StableLog(disk), 1000)
    assert again.trim_point == 2
    assert sorted(again.votes) == [3, 4]


def test_skip_spanning_the_start_is_served():
    acc = Acceptor(StableLog(MemDisk()), 100)
    acc.on_decision(Decision(0, B, ProposedValue.skip(10)))
    acc.on_decision(Decision(10, B, val(10)))
    out, status = acc.serve(4, 10)
    assert [d.instance for d in out] == [0, 10]


# --- model check ------------------------------------------------------------------------

@pytest.mark.parametrize("replicas, groups, instances", [(3, 2, 2), (3, 1, 5), (5, 1, 2)])
def test_model_check_majorities(replicas, groups, instances):
    r = model_check_recovery(replicas, groups, instances)
    assert r.ok, r.violations[:3]
    assert r.recoveries > 0 and r.trims > 0


def test_model_check_finds_non_intersecting_quorums():
    r = model_check_recovery(3, 2, 2, quorum=1)
    assert not r.ok
    assert any("below trim" in v for v in r.violations)
