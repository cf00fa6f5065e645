import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrpaxos.messages import Message, ProposedValue
from mrpaxos.multiring import (
    BLOCKED,
    DecidedQueue,
    Delivery,
    MergeCursor,
    Skipped,
    SkipPolicy,
    merge_all,
    merge_next,
    rate_level_tick,
)


def app(tag):
    return ProposedValue.app([Message(0, tag, b"%d" % tag)])


def fill(q, start, n, base=0):
    for i in range(start, start + n):
        q.add(i, app(base + i))


def test_alternates_with_m1():
    qs = {1: DecidedQueue(1), 2: DecidedQueue(2)}
    fill(qs[1], 0, 4)
    fill(qs[2], 0, 4, 100)
    out = merge_all(MergeCursor([2, 1], 1), qs)
    assert [d.group for d in out] == [1, 2] * 4


def test_m2_takes_two_per_turn():
    qs = {0: DecidedQueue(0), 1: DecidedQueue(1)}
    fill(qs[0], 0, 4)
    fill(qs[1], 0, 4)
    out = merge_all(MergeCursor([0, 1], 2), qs)
    assert [d.group for d in out] == [0, 0, 1, 1, 0, 0, 1, 1]


def test_skip_advances_without_deliveries():
    qs = {1: DecidedQueue(1)}
    qs[1].add(0, ProposedValue.skip(10))
    qs[1].add(10, app(7))
    cur = MergeCursor([1], 1)
    out = merge_all(cur, qs)
    assert all(isinstance(x, Skipped) for x in out[:10])
    assert [x.instance for x in out[:10]] == list(range(10))
    assert isinstance(out[10], Delivery) and out[10].instance == 10
    assert cur.next_instance[1] == 11


def test_skip_counts_toward_turn_quota():
    qs = {1: DecidedQueue(1), 2: DecidedQueue(2)}
    qs[1].add(0, ProposedValue.skip(2))
    fill(qs[2], 0, 2)
    out = merge_all(MergeCursor([1, 2], 1), qs)
    assert [(type(x).__name__, x.group) for x in out] == [
        ("Skipped", 1), ("Delivery", 2), ("Skipped", 1), ("Delivery", 2)]


@given(st.lists(st.integers(0, 50), max_size=30))
def test_single_group_is_identity(tags):
    q = DecidedQueue(5)
    for i, t in enumerate(tags):
        q.add(i, app(t))
    out = merge_all(MergeCursor([5], 3), {5: q})
    assert [d.value for d in out] == [app(t) for t in tags]


def test_out_of_order_decisions_released_in_order():
    q = DecidedQueue(0)
    q.add(1, app(1))
    assert q.peek() is BLOCKED and q.has_gap
    q.add(0, app(0))
    assert not q.add(0, app(99))
    out = merge_all(MergeCursor([0]), {0: q})
    assert [d.instance for d in out] == [0, 1]


def test_blocks_on_missing_instance_of_current_group():
    qs = {0: DecidedQueue(0), 1: DecidedQueue(1)}
    fill(qs[1], 0, 3)
    cur = MergeCursor([0, 1])
    assert merge_next(cur, qs) is BLOCKED
    assert cur.current == 0


def test_late_skip_covering_consumed_instances():
    q = DecidedQueue(0, next_instance=5)
    assert q.add(3, ProposedValue.skip(4))
    assert isinstance(q.peek(), Skipped)
    q.consume()
    q.consume()
    assert q.peek() is BLOCKED and q.next == 7


def test_cursor_snapshot_and_checkpoint_id():
    cur = MergeCursor([0, 1], 2)
    for _ in range(5):
        cur.advance()
    assert cur.checkpoint_id() == ((0, 2), (1, 1))
    assert MergeCursor.restore(cur.snapshot()) == cur
    rebuilt = MergeCursor.from_id(cur.checkpoint_id(), 2)
    assert rebuilt.snapshot() == cur.snapshot()
    with pytest.raises(ValueError):
        MergeCursor.from_id(((0, 0), (1, 3)), 2)


def test_queue_reset_keeps_covering_skip():
    q = DecidedQueue(0)
    q.add(2, ProposedValue.skip(5))
    q.add(9, app(9))
    q.reset(4)
    assert isinstance(q.peek(), Skipped) and q.skip_end == 7
    assert 9 in q.decided


@pytest.mark.parametrize("proposed, expected", [(30, 15), (45, None), (0, 45), (60, None)])
def test_rate_level_tick(proposed, expected):
    pol = SkipPolicy(delta_ms=5, max_rate=9000)
    assert pol.budget == 45
    pol.record(proposed)
    skip = rate_level_tick(pol)
    if expected is None:
        assert skip is None
    else:
        assert skip.is_skip and skip.count == expected
    assert pol.proposed_in_interval == 0
