import pytest

from mrpaxos.core import Tuning, simple_cluster
from mrpaxos.harness.checker import check_trace
from mrpaxos.transport.simnet import (
    SimEvent,
    SimNet,
    StepBoundExceeded,
    parse_workload,
    sim_run,
)

TEN = "\n".join(f"at {5 + i} propose 0 64" for i in range(10))


def test_parse_workload():
    evs = parse_workload("at 20 crash 1  # comment\n\nat 10 propose 0 64\n")
    assert evs == [SimEvent(10.0, "propose", (0, 64)), SimEvent(20.0, "crash", (1,))]
    for bad in ("at x propose 0 1", "at 1 explode 3", "at 1 crash", "crash 3"):
        with pytest.raises(ValueError):
            parse_workload(bad)


def test_same_seed_same_trace():
    cfg = simple_cluster(2, {6: [0, 1], 7: [1]})
    wl = TEN + "\nat 7 propose 1 32\nat 9 crash 1\nat 30 restart 1"
    assert sim_run(cfg, wl, seed=4).digest() == sim_run(cfg, wl, seed=4).digest()
    assert sim_run(cfg, wl, seed=4).digest() != sim_run(cfg, wl, seed=5).digest()


def test_three_learners_identical_sequences():
    cfg = simple_cluster(1, {3: [0], 4: [0], 5: [0]})
    net = SimNet(cfg, 0)
    net.schedule(parse_workload(TEN))
    net.run_to_quiescence(5000)
    seqs = [net.delivered(p) for p in (3, 4, 5)]
    assert len(seqs[0]) == 10 and seqs[0] == seqs[1] == seqs[2]


def test_non_coordinator_acceptor_crash_keeps_deciding():
    cfg = simple_cluster(1, {3: [0]})
    wl = "at 1 crash 2\n" + TEN
    trace = sim_run(cfg, wl, seed=2)
    assert len(trace.of("deliver")) == 10
    assert check_trace(trace, cfg).ok


def test_coordinator_restart_resumes():
    cfg = simple_cluster(1, {3: [0], 4: [0]})
    wl = TEN + "\nat 8 crash 0\nat 40 restart 0\nat 60 propose 0 16"
    trace = sim_run(cfg, wl, seed=3)
    assert len([e for e in trace.of("deliver") if e[2] == 3]) == 11
    rep = check_trace(trace, cfg)
    assert rep.ok, str(rep)


def test_learner_subscriptions_filter_delivery():
    cfg = simple_cluster(2, {6: [0, 1], 7: [0, 1], 8: [1]})
    wl = "at 5 propose 1 10\nat 6 propose 0 10\nat 7 propose 1 10"
    net = SimNet(cfg, 0)
    net.schedule(parse_workload(wl))
    net.run_to_quiescence(5000)
    groups = {p: {e[3] for e in net.trace.of("deliver") if e[2] == p} for p in (6, 7, 8)}
    assert groups == {6: {0, 1}, 7: {0, 1}, 8: {1}}


def test_interleaved_multicasts_acyclic():
    cfg = simple_cluster(2, {6: [0, 1], 7: [0, 1], 8: [0], 9: [1]})
    wl = "\n".join(f"at {1 + i * 0.3:.1f} propose {i % 2} 40" for i in range(100))
    trace = sim_run(cfg, wl, seed=9)
    rep = check_trace(trace, cfg)
    assert rep.ok, str(rep)
    assert rep.stats["deliver"] == 4 * 50 + 2 * 50


def test_quiescence_bound_reported():
    cfg = simple_cluster(1, {3: [0]})
    with pytest.raises(StepBoundExceeded) as exc:
        # two of three acceptors down: nothing can be decided
        sim_run(cfg, "at 1 crash 1\nat 1 crash 2\n" + TEN, max_time_ms=500)
    assert exc.value.trace.of("propose")


def test_per_link_fifo_and_integer_clock():
    cfg = simple_cluster(1, {3: [0]}, tuning=Tuning(rate_leveling=False))
    from mrpaxos.transport.simnet import SimParams
    net = SimNet(cfg, 1, params=SimParams(trace_messages=True))
    net.schedule(parse_workload(TEN))
    net.run_to_quiescence(5000)
    assert all(isinstance(e[0], int) for e in net.trace)
    times = [e[0] for e in net.trace]
    assert times == sorted(times)
