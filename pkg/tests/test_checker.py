from mrpaxos.core import simple_cluster
from mrpaxos.harness.checker import (
    check_acyclic,
    check_agreement,
    check_checkpoints,
    check_integrity,
    check_trace,
    check_trims,
    check_validity,
    partition_sequences,
)
from mrpaxos.transport.simnet import sim_run

CFG = simple_cluster(2, {6: [0, 1], 7: [0, 1], 8: [0], 9: [1]})


def test_fault_free_trace_passes():
    wl = "\n".join(f"at {1 + i} propose {i % 2} 32" for i in range(20))
    rep = check_trace(sim_run(CFG, wl, seed=1), CFG)
    assert rep.ok, str(rep)
    assert rep.stats["deliver"] == 20 * 2 + 10 + 10


def test_cycle_detected():
    seqs = {0: {0: ((1, 1), None), 1: ((1, 2), None)},
            1: {0: ((1, 2), None), 1: ((1, 1), None)}}
    (v,) = check_acyclic(seqs)
    assert v.prop == "acyclic"
    assert set(v.counterexample) == {(1, 1), (1, 2)}


def test_cyclic_trace_rejected_end_to_end():
    cfg = simple_cluster(3, {9: [0, 1], 10: [0, 1, 2]})
    trace = [
        (0, "propose", 0, 0, (0, 1)), (0, "propose", 1, 1, (1, 1)),
        (10, "deliver", 9, 0, 0, 1, (0, 1)), (11, "deliver", 9, 1, 0, 2, (1, 1)),
        (12, "deliver", 10, 1, 0, 1, (1, 1)), (13, "deliver", 10, 0, 0, 2, (0, 1)),
    ]
    rep = check_trace(trace, cfg)
    assert [v.prop for v in rep.violations] == ["acyclic"]


def test_agreement_violation():
    trace = [(1, "learn", 6, 0, 4, b"a"), (2, "learn", 7, 0, 4, b"b")]
    (v,) = check_agreement(trace)
    assert v.prop == "agreement" and len(v.counterexample) == 2


def test_validity_violation():
    trace = [(0, "propose", 0, 0, (0, 1)), (1, "deliver", 6, 1, 0, 1, (0, 1)),
             (2, "deliver", 6, 0, 1, 2, (5, 5))]
    props = sorted(v.detail for v in check_validity(trace))
    assert len(props) == 2


def test_integrity_violation_within_one_incarnation_only():
    d = (1, "deliver", 6, 0, 0, 1, (0, 1))
    assert check_integrity([d, d])
    assert not check_integrity([d, (2, "start", 6, 2), d])


def test_merge_divergence_reported():
    trace = [(1, "deliver", 6, 0, 0, 1, (0, 1)), (2, "deliver", 7, 0, 0, 1, (0, 2))]
    _, out = partition_sequences(trace, CFG)
    assert out and out[0].prop == "merge_order"


def test_checkpoint_predicate_and_divergence():
    bad = [(1, "checkpoint", 6, ((0, 1), (1, 3)), 4, "d")]
    assert check_checkpoints(bad, CFG)[0].prop == "checkpoint"
    split = [(1, "checkpoint", 6, ((0, 1), (1, 1)), 4, "d1"),
             (2, "checkpoint", 7, ((0, 1), (1, 1)), 4, "d2")]
    assert "divergent" in check_checkpoints(split, CFG)[0].detail


def test_trim_above_quorum_checkpoints_rejected():
    trace = [(1, "checkpoint", 6, ((0, 5), (1, 5)), 10, "x"),
             (2, "trim", 0, 0, 5, ((6, 5),))]
    out = check_trims(trace, CFG)
    assert out and "covering checkpoint" in out[0].detail
    ok = trace[:1] + [(1, "checkpoint", 7, ((0, 5), (1, 5)), 10, "x"),
                      (1, "checkpoint", 8, ((0, 5),), 5, "y"),
                      (2, "trim", 0, 0, 5, ((6, 5), (7, 5), (8, 5)))]
    assert check_trims(ok, CFG) == []
