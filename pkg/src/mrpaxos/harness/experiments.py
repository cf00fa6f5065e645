"""Scripted simulator experiments used by the acceptance suite and the demos.

``DESK`` is a CPU cost profile for the simulator (100 µs per message plus
20 µs per KB), so a simulated cluster saturates at thousands of operations
per second, the same order as the TCP runtime on one core.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from mrpaxos.core import ClusterConfig, ServiceConfig, Tuning, simple_cluster
from mrpaxos.harness.bench import bench_sim
from mrpaxos.harness.metrics import MetricsReport
from mrpaxos.harness.simclient import CLIENT_BASE, SimClient
from mrpaxos.harness.workload import Workload
from mrpaxos.transport.simnet import SimNet, SimParams, Trace

DESK = SimParams(cpu_base_us=100, cpu_per_kb_us=20.0)


def measure_peak(cfg: ClusterConfig, mode: str = "kv", size: int = 512,
                 clients: tuple[int, ...] = (8, 32, 128), duration_ms: float = 500.0,
                 params: SimParams = DESK, seed: int = 0) -> float:
    """Highest closed-loop throughput (ops per virtual second) over ``clients``."""
    return max(bench_sim(cfg, c, size, duration_ms, mode, seed=seed, params=params).throughput
               for c in clients)


class OpenLoad:
    """Issues requests at a fixed virtual rate, spread over several clients.

    Unlike the closed-loop driver, a slow or unavailable cluster does not
    slow the offered load down; requests simply stay pending and are retried.
    """

    def __init__(self, net: SimNet, wl: Workload, rate: float, start_ms: float, stop_ms: float,
                 clients: int = 16, timeout_ms: float = 300.0, first_id: int = CLIENT_BASE):
        self.net, self.wl = net, wl
        self.step_ms = 1000.0 / rate
        self.stop_ms = stop_ms
        self.clients = [SimClient(net, first_id + i, timeout_ms) for i in range(clients)]
        self.report = MetricsReport(float("inf"))
        self.issued = 0
        self.answered = 0
        self._t0 = start_ms
        net.call_at(start_ms, self._tick)

    def _tick(self) -> None:
        now = self.net.now_us / 1000.0
        if now >= self.stop_ms:
            return
        i = self.issued % len(self.clients)
        req = self.wl.next(i)
        self.issued += 1
        started = self.net.now_us

        def done(_p, req=req, started=started):
            self.answered += 1
            self.report.add((self.net.now_us / 1000.0 - self._t0) / 1000.0, req.ring,
                            self.wl.size, (self.net.now_us - started) / 1000.0)

        self.clients[i].submit(req.target, req.command, req.needed, done)
        self.net.call_at(now + self.step_ms, self._tick)

    @property
    def outstanding(self) -> int:
        return self.issued - self.answered


# --- recovery timeline --------------------------------------------------------------------

def recovery_cluster(replicas: int = 3, checkpoint_interval: int = 2000,
                     trim_interval_ms: float = 500.0) -> ClusterConfig:
    learners = {3 + i: [0] for i in range(replicas)}
    return simple_cluster(1, learners, service=ServiceConfig(kind="kv"),
                          tuning=Tuning(checkpoint_interval=checkpoint_interval,
                                        trim_interval_ms=trim_interval_ms, retry_ms=50.0))


@dataclass
class RecoveryResult:
    peak: float
    rate: float
    victim: int
    issued: int
    answered: int
    recovered: bool
    recovered_from: int | None
    equal_state: bool
    cursors: dict[int, tuple]
    digests: dict[int, bytes]
    report: MetricsReport
    trace: Trace = field(repr=False)

    @property
    def ok(self) -> bool:
        return self.recovered and self.equal_state and self.answered == self.issued

    def throughput_series(self) -> list[tuple[int, int]]:
        """(second, completed ops) pairs for plotting the availability dip."""
        out: dict[int, int] = {}
        for s in self.report.samples:
            out[int(s.t)] = out.get(int(s.t), 0) + 1
        return sorted(out.items())


def recovery_timeline(cfg: ClusterConfig | None = None, *, load_fraction: float = 0.75,
                      kill_at_ms: float = 2000.0, restart_at_ms: float = 10000.0,
                      end_ms: float = 12000.0, victim: int | None = None,
                      peak: float | None = None, seed: int = 0,
                      params: SimParams = DESK, settle_ms: float = 20000.0) -> RecoveryResult:
    """Kill one replica under steady load, restart it, and compare its state.

    The load runs from 0 to ``end_ms`` at ``load_fraction`` of the measured
    peak.  Afterwards the run continues until every request is answered and
    all replicas reach the same merge position, then the replica digests are
    compared.
    """
    cfg = cfg or recovery_cluster()
    if peak is None:
        peak = measure_peak(cfg, params=params, seed=seed)
    rate = peak * load_fraction
    learners = cfg.learners_of(cfg.groups[0])
    victim = learners[-1] if victim is None else victim

    net = SimNet(cfg, seed, params=params)
    wl = Workload(cfg, "kv", 512, seed)
    pre = SimClient(net, CLIENT_BASE + 999, 300.0)
    for r in wl.preload():
        pre.submit(r.target, r.command, r.needed)
    load = OpenLoad(net, wl, rate, 100.0, end_ms)
    net.call_at(kill_at_ms, lambda: net.crash(victim))
    net.call_at(restart_at_ms, lambda: net.restart(victim))

    def converged() -> bool:
        if load.outstanding or pre.core.pending or not net.up.get(victim):
            return False
        reps = [net.nodes[p].replica for p in learners]
        if any(r.recovering for r in reps):
            return False
        return len({r.cursor.snapshot() for r in reps}) == 1

    net.run_until(end_ms)
    t = end_ms
    while not converged() and t < end_ms + settle_ms:
        t += 10.0
        net.run_until(t)

    reps = {p: net.nodes[p].replica for p in learners}
    cursors = {p: r.cursor.snapshot() for p, r in reps.items()}
    digests = {p: r.service.digest() for p, r in reps.items()}
    recs = [e for e in net.trace.of("recover") if e[2] == victim and e[0] >= restart_at_ms * 1000]
    equal = len(set(cursors.values())) == 1 and len(set(digests.values())) == 1
    return RecoveryResult(peak, rate, victim, load.issued, load.answered, bool(recs),
                          recs[0][4] if recs else None, equal, cursors, digests,
                          load.report, net.trace)


# --- merge progress under rate leveling -------------------------------------------------

@dataclass
class MergeProgress:
    leveling: bool
    delta_ms: float
    ring_rtt_ms: float
    deliveries: int
    max_gap_ms: float

    @property
    def bound_ms(self) -> float:
        return self.delta_ms + self.ring_rtt_ms

    @property
    def ok(self) -> bool:
        return self.deliveries > 1 and self.max_gap_ms <= self.bound_ms


def merge_progress(leveling: bool = True, *, delta_ms: float = 5.0, m: int = 1,
                   max_rate: float = 9000.0, rate: float = 2000.0,
                   start_ms: float = 200.0, duration_ms: float = 1000.0,
                   seed: int = 0, params: SimParams | None = None) -> MergeProgress:
    """Ring 0 is kept busy, ring 1 is idle; a learner subscribes to both.

    Returns the longest virtual-time gap between consecutive deliveries of
    ring 0 messages at the learner over the measurement window, together with
    the observed ring round trip (coordinator assignment to learner decision).
    """
    tuning = Tuning(merge_window=m, delta_ms=delta_ms, max_rate=max_rate,
                    rate_leveling=leveling)
    cfg = simple_cluster(2, {6: [0, 1]}, tuning=tuning)
    net = SimNet(cfg, seed, params=params)
    rng = random.Random(seed)
    end_ms = start_ms + duration_ms
    step = 1000.0 / rate

    def tick():
        now = net.now_us / 1000.0
        if now < end_ms:
            net.inject(0, rng.randint(64, 1024))
            net.call_at(now + step, tick)

    net.call_at(0.0, tick)
    net.run_until(end_ms + 50.0)

    lo, hi = int(start_ms * 1000), int(end_ms * 1000)
    times = [e[0] for e in net.trace.of("deliver") if e[2] == 6 and e[3] == 0]
    window = [t for t in times if lo <= t <= hi]
    points = [lo] + window + [hi]
    gap = max(b - a for a, b in zip(points, points[1:])) / 1000.0

    assigned = {(e[3], e[4]): e[0] for e in net.trace.of("assign")}
    # round trip of the idle ring: what a skip needs to reach the learner
    rtts = [e[0] - assigned[(e[3], e[4])] for e in net.trace.of("learn")
            if e[2] == 6 and e[3] == 1 and (e[3], e[4]) in assigned]
    rtt = max(rtts) / 1000.0 if rtts else 0.0
    return MergeProgress(leveling, delta_ms, rtt, len(window), gap)


# --- service semantics --------------------------------------------------------------------

def kv_cluster(partitions: int = 2, replicas: int = 2, mode: str = "hash",
               splits: tuple[str, ...] = ()) -> ClusterConfig:
    """``partitions`` rings plus a global ring that every replica also joins."""
    glob = partitions
    first = 3 * (partitions + 1)
    learners = {}
    for p in range(partitions):
        for r in range(replicas):
            learners[first + p * replicas + r] = [p, glob]
    return simple_cluster(partitions + 1, learners,
                          service=ServiceConfig(kind="kv", global_group=glob, partition_mode=mode,
                                                range_splits=splits),
                          tuning=Tuning(checkpoint_interval=500, trim_interval_ms=200.0))


def random_kv_commands(rng: random.Random, n: int, keys: int = 200):
    from mrpaxos.services import kv
    out = []
    for _ in range(n):
        k = b"k%04d" % rng.randrange(keys)
        r = rng.random()
        if r < 0.25:
            out.append(kv.insert(k, b"v%d" % rng.randrange(10**6)))
        elif r < 0.5:
            out.append(kv.update(k, b"u%d" % rng.randrange(10**6)))
        elif r < 0.65:
            out.append(kv.delete(k))
        elif r < 0.95:
            out.append(kv.read(k))
        else:
            hi = b"k%04d" % min(keys - 1, int(k[1:]) + rng.randrange(1, 20))
            out.append(kv.scan(k, hi))
    return out


@dataclass
class KvRun:
    commands: int
    answered: int
    digests: dict[int, dict[int, str]]      # partition group -> pid -> digest
    histories: list = field(default_factory=list)
    net: SimNet | None = field(default=None, repr=False)

    @property
    def replicas_agree(self) -> bool:
        return all(len(set(d.values())) == 1 for d in self.digests.values())


def kv_replay(commands: int = 10000, clients: int = 8, seed: int = 0, keys: int = 200,
              cfg: ClusterConfig | None = None, think_ms: float = 0.0,
              settle_ms: float = 60_000.0) -> KvRun:
    """Drive random key-value commands through the simulator and collect digests.

    Digests are taken once every replica has consumed the same merge prefix.
    """
    from mrpaxos.harness.simclient import KvSimClient
    from mrpaxos.services import kv
    cfg = cfg or kv_cluster()
    rng = random.Random(seed)
    net = SimNet(cfg, seed)
    pmap = kv.PartitionMap.from_config(cfg)
    per = [commands // clients + (1 if i < commands % clients else 0) for i in range(clients)]
    cl = [KvSimClient(net, CLIENT_BASE + i, pmap, random_kv_commands(rng, per[i], keys),
                      start_ms=10.0 + i, think_ms=think_ms) for i in range(clients)]
    learners = sorted({p for g in pmap.groups for p in cfg.learners_of(g)})

    def converged() -> bool:
        if not all(c.finished for c in cl):
            return False
        reps = [net.nodes[p].replica for p in learners]
        if any(r.recovering for r in reps):
            return False
        by_part: dict[int, set] = {}
        for r in reps:
            by_part.setdefault(r.service.partition, set()).add(r.cursor.snapshot())
        return all(len(s) == 1 for s in by_part.values())

    t = 0.0
    while not converged() and t < settle_ms:
        t += 20.0
        net.run_until(t)
    digests: dict[int, dict[int, str]] = {}
    for p in learners:
        rep = net.nodes[p].replica
        digests.setdefault(rep.service.partition, {})[p] = rep.service.digest()
    return KvRun(commands, sum(len(c.history) for c in cl), digests,
                 [c.history for c in cl], net)


def kv_small_histories(seed: int, clients: int = 3, ops: int = 4, keys: int = 3) -> list:
    """A short concurrent history over a few keys, including a cross-partition scan."""
    from mrpaxos.services import kv
    rng = random.Random(seed)
    cfg = kv_cluster()
    programs = []
    for _ in range(clients):
        prog = random_kv_commands(rng, ops, keys)
        programs.append(prog)
    programs[0][rng.randrange(ops)] = kv.scan(b"k0000", b"k%04d" % (keys - 1))
    from mrpaxos.harness.simclient import KvSimClient
    net = SimNet(cfg, seed)
    pmap = kv.PartitionMap.from_config(cfg)
    cl = [KvSimClient(net, CLIENT_BASE + i, pmap, prog, start_ms=5.0 + rng.random(),
                      think_ms=rng.random()) for i, prog in enumerate(programs)]
    t = 0.0
    while not all(c.finished for c in cl) and t < 10_000:
        t += 5.0
        net.run_until(t)
    return [op for c in cl for op in c.history]
