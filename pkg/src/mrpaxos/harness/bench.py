"""Closed-loop load drivers against a real cluster or inside the simulator."""

from __future__ import annotations

import asyncio
import logging
import time

from mrpaxos.core import ClusterConfig
from mrpaxos.harness.metrics import MetricsReport
from mrpaxos.harness.simclient import CLIENT_BASE, SimClient
from mrpaxos.harness.workload import Request, Workload
from mrpaxos.transport.simnet import SimNet, SimParams
from mrpaxos.transport.tcp import TcpClient

log = logging.getLogger(__name__)


class Unreachable(ConnectionError):
    pass


async def _preload(cfg: ClusterConfig, wl: Workload, timeout: float) -> None:
    reqs = wl.preload()
    if not reqs:
        return
    client = TcpClient(cfg, CLIENT_BASE - 1, timeout=timeout)
    try:
        await asyncio.wait_for(
            asyncio.gather(*(client.call(r.target, r.command, r.needed) for r in reqs)),
            timeout=60 + len(reqs) * 0.01)
    finally:
        await client.close()


async def bench_tcp(cfg: ClusterConfig, clients: int, size: int, duration: float,
                    mode: str = "dummy", warmup: float = 1.0, timeout: float = 1.0,
                    seed: int = 0, connect_timeout: float = 10.0) -> MetricsReport:
    """Run ``clients`` closed-loop clients for ``warmup + duration`` seconds.

    Only completions inside the measurement window are counted.
    """
    report = MetricsReport(duration)
    if duration <= 0 or clients <= 0:
        return report
    wl = Workload(cfg, mode, size, seed)
    probe = TcpClient(cfg, CLIENT_BASE - 2, timeout=timeout)
    try:
        await asyncio.wait_for(probe.call(*_probe(wl)), connect_timeout)
    except asyncio.TimeoutError:
        raise Unreachable("cluster did not answer a probe request") from None
    finally:
        await probe.close()
    await _preload(cfg, wl, timeout)

    loop = asyncio.get_running_loop()
    t0 = loop.time() + warmup
    stop_at = t0 + duration

    async def run(i: int) -> None:
        c = TcpClient(cfg, CLIENT_BASE + i, timeout=timeout)
        try:
            while loop.time() < stop_at:
                req = wl.next(i)
                start = loop.time()
                await c.call(req.target, req.command, req.needed)
                end = loop.time()
                report.add(end - t0, req.ring, size, (end - start) * 1000.0)
        finally:
            await c.close()

    tasks = [asyncio.create_task(run(i)) for i in range(clients)]
    await asyncio.sleep(stop_at - loop.time())
    # clients blocked on an unanswered request would stretch the run; stop them
    await asyncio.sleep(min(timeout, 0.5))
    for t in tasks:
        t.cancel()
    await asyncio.gather(*tasks, return_exceptions=True)
    return report


def _probe(wl: Workload) -> tuple[int, bytes, frozenset[int]]:
    if wl.mode == "kv":
        from mrpaxos.services import kv
        from mrpaxos.services.client import kv_plan
        cmd = kv.read(b"probe")
        target, needed = kv_plan(wl.pmap, cmd)
        return target, cmd.encode(), needed
    req = wl.next(0)
    return req.target, req.command, req.needed


def run_bench(cfg: ClusterConfig, clients: int, size: int, duration: float,
              mode: str = "dummy", **kw) -> MetricsReport:
    t = time.monotonic()
    rep = asyncio.run(bench_tcp(cfg, clients, size, duration, mode, **kw))
    log.info("bench finished in %.1fs", time.monotonic() - t)
    return rep


# --- simulated ---------------------------------------------------------------------

class _SimLoop:
    def __init__(self, net: SimNet, wl: Workload, index: int, report: MetricsReport,
                 t0_ms: float, stop_ms: float, timeout_ms: float):
        self.net, self.wl, self.index, self.report = net, wl, index, report
        self.t0_ms, self.stop_ms = t0_ms, stop_ms
        self.client = SimClient(net, CLIENT_BASE + index, timeout_ms)

    def issue(self) -> None:
        if self.net.now_us / 1000.0 >= self.stop_ms:
            return
        req: Request = self.wl.next(self.index)
        started = self.net.now_us
        self.client.submit(req.target, req.command, req.needed,
                           lambda p: self.done(req, started))

    def done(self, req: Request, started: int) -> None:
        now_ms = self.net.now_us / 1000.0
        self.report.add((now_ms - self.t0_ms) / 1000.0, req.ring, self.wl.size,
                        (self.net.now_us - started) / 1000.0)
        self.issue()


def bench_sim(cfg: ClusterConfig, clients: int, size: int, duration_ms: float,
              mode: str = "dummy", seed: int = 0, warmup_ms: float = 200.0,
              timeout_ms: float = 200.0, params: SimParams | None = None) -> MetricsReport:
    """Closed-loop benchmark in virtual time; throughput is per virtual second."""
    net = SimNet(cfg, seed, params=params)
    wl = Workload(cfg, mode, size, seed)
    pre = SimClient(net, CLIENT_BASE + clients + 1, timeout_ms)
    for r in wl.preload():
        pre.submit(r.target, r.command, r.needed)
    report = MetricsReport(duration_ms / 1000.0)
    t0 = warmup_ms + (100.0 if wl.preload() else 0.0)
    loops = [_SimLoop(net, wl, i, report, t0, t0 + duration_ms, timeout_ms)
             for i in range(clients)]
    for lp in loops:
        net.call_at(t0 - warmup_ms / 2, lp.issue)
    net.run_until(t0 + duration_ms)
    return report
