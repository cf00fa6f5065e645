"""Experiments against real node processes on this machine."""

from __future__ import annotations

import asyncio
import shutil
import signal
import time
from dataclasses import dataclass, field
from pathlib import Path

from mrpaxos.core import ClusterConfig, ServiceConfig, Tuning, simple_cluster
from mrpaxos.harness.bench import bench_tcp
from mrpaxos.harness.cluster import LocalCluster, free_port_range
from mrpaxos.harness.metrics import MetricsReport
from mrpaxos.harness.simclient import CLIENT_BASE
from mrpaxos.node import unwrap
from mrpaxos.recovery import StableLog
from mrpaxos.ring import Acceptor
from mrpaxos.storage import DirDisk
from mrpaxos.transport.tcp import TcpClient


def _with_free_ports(build) -> ClusterConfig:
    # simple_cluster numbers ports consecutively from the base
    n = max(p.pid for p in build(0).processes) + 1
    return build(free_port_range(n))


# --- scaling ---------------------------------------------------------------------------

def scaling_config(rings: int, base_port: int = 0, log_mode: str = "async") -> ClusterConfig:
    """``rings`` independent rings of three acceptors, each with its own learner."""
    n_acc = 3 * rings
    learners = {n_acc + g: [g] for g in range(rings)}
    return simple_cluster({g: 3 for g in range(rings)}, learners,
                          service=ServiceConfig(kind="dummy"),
                          tuning=Tuning(log_mode=log_mode), base_port=base_port)


def scaling_run(rings: int, duration: float, workdir: str | Path, clients_per_ring: int = 8,
                size: int = 1024, warmup: float = 2.0) -> MetricsReport:
    cfg = _with_free_ports(lambda port: scaling_config(rings, port))
    with LocalCluster(cfg, workdir):
        return asyncio.run(bench_tcp(cfg, clients_per_ring * rings, size, duration, "dummy",
                                     warmup=warmup))


# --- durability ---------------------------------------------------------------------------

@dataclass
class DurabilityResult:
    completed_before_kill: int
    logged: int                     # of those, found among the acceptor's logged votes
    served: int                     # of those, served as decisions straight from the log
    torn_bytes: int
    restarted_ok: bool
    completed_after_restart: int
    missing: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (self.completed_before_kill > 0 and not self.missing and self.restarted_ok
                and self.completed_after_restart > 0)


def durability_config(base_port: int = 0) -> ClusterConfig:
    return simple_cluster(1, {3: [0], 4: [0]}, service=ServiceConfig(kind="record"),
                          tuning=Tuning(log_mode="sync", checkpoint_interval=1_000_000,
                                        trim_interval_ms=3_600_000.0),
                          base_port=base_port)


def _client_commands(votes) -> set[tuple[int, int]]:
    out = set()
    for _b, v in votes.values():
        for msg in v.messages:
            key, _cmd = unwrap(msg.payload)
            if key is not None:
                out.add(key)
    return out


async def _load(cfg: ClusterConfig, clients: int, stop: asyncio.Event, done: list,
                first_id: int) -> None:
    async def run(i: int) -> None:
        c = TcpClient(cfg, first_id + i, timeout=0.5)
        try:
            n = 0
            while not stop.is_set():
                n += 1
                await c.call(0, b"op-%d-%d" % (i, n), frozenset([0]))
                done.append(((first_id + i, n), time.monotonic()))
        finally:
            await c.close()

    tasks = [asyncio.create_task(run(i)) for i in range(clients)]
    await stop.wait()
    await asyncio.sleep(0.2)
    for t in tasks:
        t.cancel()
    await asyncio.gather(*tasks, return_exceptions=True)


def durability_drill(workdir: str | Path, victim: int = 1, load_s: float = 2.0,
                     after_s: float = 1.0, clients: int = 8, tear: bool = True) -> DurabilityResult:
    """SIGKILL acceptor ``victim`` mid-load in sync mode and audit its log.

    Every request answered before the kill went through the victim's vote
    (the ring passes through every live acceptor), so its durable log must
    hold each of them.  The tail of the log is then torn on purpose and the
    process restarted on it; it must rejoin and the cluster keep answering.
    """
    workdir = Path(workdir)
    cfg = _with_free_ports(durability_config)
    cluster = LocalCluster(cfg, workdir)
    cluster.start()
    try:
        cluster.wait_listening()

        async def phase1() -> list:
            done: list = []
            stop = asyncio.Event()
            loader = asyncio.create_task(_load(cfg, clients, stop, done, CLIENT_BASE))
            await asyncio.sleep(load_s)
            cluster.kill(victim, signal.SIGKILL)
            before = [k for k, _ in done]
            await asyncio.sleep(after_s)
            stop.set()
            await loader
            return before

        before = asyncio.run(phase1())
        log_name = f"acceptor-{cfg.groups[0]}.log"
        vdir = workdir / str(victim)
        torn = 0
        if tear:
            # a record header promising more bytes than were written
            with open(vdir / log_name, "ab") as fh:
                fh.write(b"\x00\x00\x04\x00\x02\x00\x00\x00")
                torn = 8

        audit = workdir / "audit"
        shutil.rmtree(audit, ignore_errors=True)
        shutil.copytree(vdir, audit)
        acc = Acceptor(StableLog(DirDisk(audit), log_name, "sync"), cfg.tuning.buffer_slots)
        logged = _client_commands(acc.votes)
        decisions, _ = acc.serve(0, 1 << 62, limit=1 << 30)
        served = _client_commands({d.instance: (d.ballot, d.value) for d in decisions})
        missing = sorted(k for k in before if k not in logged)

        size_at_restart = (vdir / log_name).stat().st_size
        cluster.start(victim)
        cluster.wait_listening()

        async def phase2() -> int:
            done: list = []
            stop = asyncio.Event()
            loader = asyncio.create_task(_load(cfg, clients, stop, done, CLIENT_BASE + 100))
            await asyncio.sleep(after_s)
            stop.set()
            await loader
            return len(done)

        after = asyncio.run(phase2())
        alive = cluster.procs[victim].poll() is None
        # the torn tail is cut on load, so growth means the victim voted again
        rejoined = (vdir / log_name).stat().st_size > size_at_restart
    finally:
        cluster.stop()
    return DurabilityResult(len(before), sum(k in logged for k in before),
                            sum(k in served for k in before), torn, alive and rejoined, after,
                            missing)
