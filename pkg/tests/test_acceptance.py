"""Acceptance criteria 1 to 7.

Each test prints one ``criterion N: PASS|FAIL (...)`` line, and the same
lines are repeated in a summary section at the end of the pytest run.
"""


import pytest

from conftest import record_verdict
from mrpaxos.harness.drills import durability_drill, scaling_run
from mrpaxos.harness.experiments import (
    kv_replay,
    kv_small_histories,
    merge_progress,
    recovery_timeline,
)
from mrpaxos.harness.scenario import random_scenario, run_scenario
from mrpaxos.recovery import model_check_recovery
from mrpaxos.services import dlog as dl
from mrpaxos.services import kv
from mrpaxos.services.base import EXISTS, NOT_FOUND, OK, TRIMMED
from mrpaxos.services.seqcheck import check_sequential_consistency
from mrpaxos.storage import MemDisk

pytestmark = pytest.mark.slow

CAMPAIGN_SEEDS = 120


def test_criterion_1_property_campaign():
    failures, stats = [], {"runs": 0, "crash": 0, "recover": 0, "trim": 0, "deliver": 0}
    shapes = set()
    for seed in range(CAMPAIGN_SEEDS):
        sc = random_scenario(seed)
        res = run_scenario(sc)
        stats["runs"] += 1
        for k in ("crash", "recover", "trim", "deliver"):
            stats[k] += res.report.stats[k]
        shapes.add(len(sc.config.rings))
        if not res.report.ok:
            failures.append((seed, str(res.report)[:500]))
    ok = not failures and shapes == {1, 2, 3}
    record_verdict(1, ok, f"{stats['runs']} seeds, ring counts {sorted(shapes)}, "
                          f"{stats['deliver']} deliveries, {stats['crash']} crashes, "
                          f"{stats['recover']} recoveries, {stats['trim']} trims, "
                          f"{len(failures)} runs with violations")
    assert ok, failures[:3]


def test_criterion_2_recovery_model_check():
    sizes = [(3, 2, 3), (3, 1, 6), (5, 2, 1), (5, 1, 2), (5, 2, 2)]
    results = [model_check_recovery(r, g, i) for r, g, i in sizes]
    control = model_check_recovery(3, 2, 2, quorum=1)
    ok = all(r.ok for r in results) and not control.ok
    states = sum(r.states for r in results)
    record_verdict(2, ok, f"{states} states over {len(sizes)} sizes with 3 and 5 replicas, "
                          f"{sum(len(r.violations) for r in results)} violations; "
                          f"non-intersecting quorum control found "
                          f"{len(control.violations)} violations")
    assert ok


def test_criterion_3_recovery_timeline():
    r = recovery_timeline()
    record_verdict(3, r.ok, f"peak {r.peak:.0f} ops/s, load {r.rate:.0f} ops/s, "
                            f"{r.answered}/{r.issued} answered, replica {r.victim} recovered "
                            f"from {r.recovered_from}, digests equal: {r.equal_state}")
    assert r.ok


def test_criterion_4_merge_progress():
    on = merge_progress(True, rate=12000)
    off = merge_progress(False, rate=12000)
    ok = on.ok and not off.ok
    record_verdict(4, ok, f"leveling on: max gap {on.max_gap_ms:.2f} ms vs bound "
                          f"{on.bound_ms:.2f} ms over {on.deliveries} deliveries; leveling off: "
                          f"{off.deliveries} deliveries, gap {off.max_gap_ms:.0f} ms")
    assert ok


def test_criterion_5_scaling(tmp_path):
    duration = 60.0
    tput = {}
    for rings in (1, 2, 4):
        rep = scaling_run(rings, duration, tmp_path / f"r{rings}")
        tput[rings] = rep.throughput
    r2, r4 = tput[2] / tput[1], tput[4] / tput[1]
    ok = r2 >= 1.5 and r4 >= 2.5
    record_verdict(5, ok, f"{duration:.0f} s runs: 1 ring {tput[1]:.0f} ops/s, "
                          f"2 rings {tput[2]:.0f} ({r2:.2f}x, need 1.5x), "
                          f"4 rings {tput[4]:.0f} ({r4:.2f}x, need 2.5x)")
    assert ok


def _table_examples() -> list[str]:
    bad = []
    s = kv.KvStore(kv.PartitionMap("hash", (0,)), 0)
    checks = [
        (s.apply(kv.insert(b"k", b"v")), (OK, b"")),
        (s.apply(kv.read(b"k")), (OK, b"v")),
        (s.apply(kv.update(b"missing", b"v"))[0], NOT_FOUND),
        (s.apply(kv.insert(b"k", b"w"))[0], EXISTS),
        (s.apply(kv.delete(b"k"))[0], OK),
        (s.apply(kv.read(b"k"))[0], NOT_FOUND),
    ]
    pm = kv.PartitionMap("range", (0, 1), (b"m",), global_group=2)
    checks += [(pm.route(kv.read(b"apple")), 0),
               (kv.PartitionMap("hash", (0, 1), global_group=2).route(kv.scan(b"a", b"z")), 2)]
    d = dl.Dlog(dl.LogDirectory({1: 0, 2: 1}, 2), (0, 1, 2), MemDisk())
    checks += [
        (d.apply(dl.append(1, b"a"))[1], b"\x00" * 8),
        (d.apply(dl.read(1, 0)), (OK, b"a")),
        (dl.decode_positions(d.apply(dl.multi_append([1, 2], b"m"))[1]), {1: 1, 2: 0}),
        (d.apply(dl.trim(1, 1))[0], OK),
        (d.apply(dl.read(1, 0))[0], TRIMMED),
        (d.apply(dl.trim(1, 2))[0], OK),
        (d.logs[1].next_position, 2),
    ]
    for i, (got, want) in enumerate(checks):
        if got != want:
            bad.append(f"example {i}: {got!r} != {want!r}")
    return bad


def test_criterion_6_service_semantics():
    bad = _table_examples()
    run = kv_replay(10000, seed=11)
    histories = 40
    sc_fail = [s for s in range(histories)
               if not check_sequential_consistency(kv_small_histories(s)).ok]
    ok = not bad and run.answered == 10000 and run.replicas_agree and not sc_fail
    record_verdict(6, ok, f"table examples failing: {len(bad)}; 10000-command replay "
                          f"answered {run.answered}, replica digests equal per partition: "
                          f"{run.replicas_agree}; {histories - len(sc_fail)}/{histories} "
                          f"histories sequentially consistent")
    assert ok, (bad, sc_fail)


def test_criterion_7_durability(tmp_path):
    r = durability_drill(tmp_path)
    record_verdict(7, r.ok, f"{r.completed_before_kill} answered before SIGKILL, "
                            f"{r.logged} in the victim's log, {r.served} re-served from it, "
                            f"{r.torn_bytes} torn bytes tolerated, rejoined: {r.restarted_ok}, "
                            f"{r.completed_after_restart} ops after restart")
    assert r.ok, r.missing[:10]
