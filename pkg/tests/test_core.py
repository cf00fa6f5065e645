import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrpaxos.core import (
    ConfigError,
    ServiceConfig,
    Tuning,
    dumps_config,
    load_config,
    parse_config,
    partition_of,
    reply_partition,
    simple_cluster,
)

ONE_RING = """
[ring 0]
members = 0 1 2 3
acceptors = 0 1 2
coordinator = 0

[process 0]
roles = acceptor proposer
[process 1]
roles = acceptor proposer
[process 2]
roles = acceptor proposer
[process 3]
subscriptions = 0
roles = learner

[tuning]
m = 1
delta_ms = 5
lambda = 9000
"""


def test_one_ring_quorum_and_partition():
    cfg = parse_config(ONE_RING)
    assert cfg.ring(0).quorum_size == 2
    parts = cfg.partitions()
    assert len(parts) == 1
    assert parts[0].replicas == frozenset({3})
    assert parts[0].groups == frozenset({0})


def test_paper_tuning_accepted_verbatim():
    t = parse_config(ONE_RING).tuning
    assert (t.merge_window, t.delta_ms, t.max_rate) == (1, 5.0, 9000.0)
    assert t.skip_budget == 45


def test_coordinator_outside_acceptors_rejected():
    bad = ONE_RING.replace("coordinator = 0", "coordinator = 3")
    with pytest.raises(ConfigError, match="coordinator"):
        parse_config(bad)


@pytest.mark.parametrize("patch, needle", [
    (("m = 1", "m = 0"), "M must"),
    (("lambda = 9000", "lambda = 0"), None),
    (("delta_ms = 5", "delta_ms = -1"), None),
    (("members = 0 1 2 3", "members = 0 1 2 3 3"), None),
    (("subscriptions = 0", "subscriptions = 7"), None),
    (("[tuning]", "[tuning]\nbogus = 1"), "unknown"),
])
def test_validation_errors(patch, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(ONE_RING.replace(*patch))


def test_unparseable_document():
    with pytest.raises(ConfigError):
        parse_config("[ring 0\nmembers=")


def test_partition_of_follows_subscription_sets():
    cfg = simple_cluster({1: 3, 2: 3}, {6: [1, 2], 7: [1, 2], 8: [2]})
    assert partition_of(6, cfg).replicas == frozenset({6, 7})
    assert partition_of(8, cfg).replicas == frozenset({8})
    with pytest.raises(KeyError):
        partition_of(99, cfg)
    with pytest.raises(ValueError):
        partition_of(0, cfg)


def test_three_learners_same_partition():
    cfg = simple_cluster(1, {3: [0], 4: [0], 5: [0]})
    assert partition_of(4, cfg).replicas == frozenset({3, 4, 5})


def test_dump_and_reload_roundtrip(tmp_path):
    cfg = simple_cluster({0: 3, 1: 5}, {8: [0, 1], 9: [1]},
                         tuning=Tuning(merge_window=2, log_mode="async"),
                         service=ServiceConfig(kind="kv", global_group=1), base_port=7000)
    path = tmp_path / "c.ini"
    path.write_text(dumps_config(cfg))
    again = load_config(path)
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_digest_changes_with_content():
    a = simple_cluster(1, {3: [0]})
    b = simple_cluster(1, {3: [0]}, tuning=Tuning(merge_window=2))
    assert a.digest() != b.digest()


def test_reply_partition_skips_global_group():
    cfg = simple_cluster({0: 3, 1: 3, 2: 3}, {9: [0, 2], 10: [1, 2]},
                         service=ServiceConfig(kind="kv", global_group=2))
    assert reply_partition(cfg, 9) == 0
    assert reply_partition(cfg, 10) == 1


@st.composite
def configs(draw):
    n_rings = draw(st.integers(1, 3))
    rings = {g: draw(st.sampled_from([1, 3, 5])) for g in range(n_rings)}
    first = sum(rings.values())
    n_learners = draw(st.integers(1, 6))
    learners = {first + i: draw(st.sets(st.integers(0, n_rings - 1), min_size=1))
                for i in range(n_learners)}
    return simple_cluster(rings, learners)


@settings(max_examples=60, deadline=None)
@given(configs())
def test_partitioning_is_an_equivalence(cfg):
    learners = [p.pid for p in cfg.processes if p.subscriptions]
    part = {p: partition_of(p, cfg).replicas for p in learners}
    for a in learners:
        assert a in part[a]
        for b in learners:
            assert (b in part[a]) == (a in part[b])
            for c in learners:
                if b in part[a] and c in part[b]:
                    assert c in part[a]
    for r in cfg.rings:
        assert r.quorum_size > len(r.acceptors) / 2
    assert cfg.groups == sorted(cfg.groups)
