"""Deterministic discrete-event runtime for whole clusters.

Every source of nondeterminism (link delay, which proposer injects a message)
comes from one seeded ``random.Random``; time is an integer microsecond clock.
Links are FIFO.  A crashed process loses its unsynced disk bytes, its timers
and every message addressed to it.  Each process has a CPU cost per handled
message so the cluster has a finite peak throughput.
"""

from __future__ import annotations

import hashlib
import heapq
import random
import shlex
from dataclasses import dataclass
from typing import Callable, Iterable

from mrpaxos.core import ClusterConfig
from mrpaxos.node import Node
from mrpaxos.services import make_service
from mrpaxos.services.base import RecordingService, Service
from mrpaxos.storage import MemDisk
from mrpaxos.transport.codec import Envelope


class StepBoundExceeded(RuntimeError):
    """The run did not settle within its event or time budget."""

    def __init__(self, msg: str, trace: "Trace"):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class SimEvent:
    """A scripted action: ``propose``, ``crash``, ``restart``, ``checkpoint`` or ``trim``."""
    at_ms: float
    kind: str
    args: tuple = ()


def parse_workload(text: str) -> list[SimEvent]:
    """Parse lines like ``at 10 propose 0 64`` or ``at 50 crash 3``."""
    events = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = shlex.split(line)
        if len(parts) < 3 or parts[0] != "at":
            raise ValueError(f"line {lineno}: expected 'at <ms> <action> ...'")
        try:
            at = float(parts[1])
            args = tuple(int(x) for x in parts[3:])
        except ValueError:
            raise ValueError(f"line {lineno}: bad number") from None
        kind = parts[2]
        arity = {"propose": 2, "crash": 1, "restart": 1, "checkpoint": 1, "trim": 1}
        if kind not in arity:
            raise ValueError(f"line {lineno}: unknown action {kind!r}")
        if len(args) != arity[kind]:
            raise ValueError(f"line {lineno}: {kind} takes {arity[kind]} arguments")
        events.append(SimEvent(at, kind, args))
    return sorted(events, key=lambda e: e.at_ms)


class Trace(list):
    """Chronological ``(time_us, kind, pid, *data)`` tuples."""

    def of(self, kind: str) -> list[tuple]:
        return [e for e in self if e[1] == kind]

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self:
            h.update(repr(e).encode())
        return h.hexdigest()


@dataclass
class SimParams:
    latency_us: tuple[int, int] = (50, 150)
    cpu_base_us: int = 5
    cpu_per_kb_us: float = 2.0
    trace_messages: bool = False


class _ProcRuntime:
    """The runtime facade handed to one incarnation of a node."""

    def __init__(self, net: "SimNet", pid: int, epoch: int):
        self.net, self.pid, self.epoch = net, pid, epoch

    def now(self) -> float:
        return self.net.now_us / 1e6

    def send(self, dst, env):
        self.net._send(self.pid, dst, env)

    def reply(self, client, env):
        self.net._reply(self.pid, client, env)

    def call_later(self, delay, fn):
        self.net._timer(self.pid, self.epoch, delay, fn)

    def is_up(self, pid):
        return self.net.up.get(pid, False)

    def trace(self, kind, *data):
        self.net.trace.append((self.net.now_us, kind) + data)


class SimNet:
    def __init__(self, cfg: ClusterConfig, seed: int = 0,
                 service_factory: Callable[[int], Service] | None = None,
                 params: SimParams | None = None):
        self.cfg = cfg
        self.rng = random.Random(seed)
        self.params = params or SimParams()
        self.service_factory = service_factory or (
            lambda pid: make_service(cfg, pid, self.disks[pid]))
        self.now_us = 0
        self._seq = 0
        self._queue: list = []
        self.trace = Trace()
        self.disks = {p.pid: MemDisk() for p in cfg.processes}
        self.nodes: dict[int, Node] = {}
        self.up: dict[int, bool] = {}
        self.epoch: dict[int, int] = {}
        self.busy_until: dict[int, int] = {}
        self._link_last: dict[tuple[int, int], int] = {}
        self.clients: dict[int, Callable[[int, Envelope], None]] = {}
        self.events_processed = 0
        self.injected: list[tuple[int, int, int, tuple[int, int]]] = []
        self.msg_count = 0
        for p in cfg.processes:
            self.up[p.pid] = True
        for p in cfg.processes:
            self.start_process(p.pid)

    # --- scheduling ------------------------------------------------------------

    def _push(self, t: int, kind: str, data) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (t, self._seq, kind, data))

    def _send(self, src: int, dst: int, env: Envelope) -> None:
        lo, hi = self.params.latency_us
        cost = self._cost(env)
        depart = max(self.now_us, self.busy_until.get(src, 0))
        arrive = depart + self.rng.randint(lo, hi)
        arrive = max(arrive, self._link_last.get((src, dst), 0))
        self._link_last[(src, dst)] = arrive
        self.msg_count += 1
        if self.params.trace_messages:
            self.trace.append((self.now_us, "send", src, dst, int(env.msg_type), env.group))
        self._push(arrive, "msg", (src, dst, env, cost))

    def _reply(self, src: int, client: int, env: Envelope) -> None:
        lo, hi = self.params.latency_us
        self._push(self.now_us + self.rng.randint(lo, hi), "reply", (src, client, env))

    def _timer(self, pid: int, epoch: int, delay: float, fn) -> None:
        self._push(self.now_us + max(1, int(round(delay * 1e6))), "timer", (pid, epoch, fn))

    def _cost(self, env: Envelope) -> int:
        p = self.params
        return p.cpu_base_us + int(len(env.payload) * p.cpu_per_kb_us / 1024)

    # --- process lifecycle ---------------------------------------------------------

    def start_process(self, pid: int) -> Node:
        self.epoch[pid] = self.epoch.get(pid, 0) + 1
        rt = _ProcRuntime(self, pid, self.epoch[pid])
        node = Node(self.cfg, pid, rt, self.disks[pid], self.service_factory(pid))
        self.nodes[pid] = node
        self.up[pid] = True
        node.start()
        return node

    def crash(self, pid: int) -> None:
        if not self.up.get(pid):
            return
        self.up[pid] = False
        self.nodes[pid].stop()
        self.disks[pid].crash()
        self.trace.append((self.now_us, "crash", pid))

    def restart(self, pid: int) -> None:
        if self.up.get(pid):
            return
        self.trace.append((self.now_us, "restart", pid))
        self.start_process(pid)

    # --- driving ----------------------------------------------------------------------

    def schedule(self, events: Iterable[SimEvent]) -> None:
        for ev in events:
            self._push(int(ev.at_ms * 1000), "script", ev)

    def register_client(self, client: int, handler: Callable[[int, Envelope], None]) -> None:
        self.clients[client] = handler

    def client_send(self, client: int, pid: int, env: Envelope) -> None:
        """Deliver a client request to ``pid`` after one link delay."""
        lo, hi = self.params.latency_us
        self._push(self.now_us + self.rng.randint(lo, hi), "msg", (client, pid, env, self._cost(env)))

    def call_at(self, t_ms: float, fn: Callable[[], None]) -> None:
        self._push(int(t_ms * 1000), "call", fn)

    def inject(self, group: int, size: int, pid: int | None = None) -> tuple[int, int] | None:
        """Multicast ``size`` bytes to ``group`` from ``pid`` or a random live proposer."""
        if pid is None:
            cands = [p for p in self.cfg.proposers_of(group) if self.up.get(p)]
            if not cands:
                return None
            pid = self.rng.choice(cands)
        n = len(self.injected)
        payload = hashlib.sha256(f"{n}".encode()).digest() * (size // 32 + 1)
        node = self.nodes[pid]
        mid = node.multicast(group, payload[:size])
        node.flush()
        self.injected.append((pid, self.epoch[pid], group, mid))
        self.trace.append((self.now_us, "propose", pid, group, mid))
        return mid

    def _script(self, ev: SimEvent) -> None:
        if ev.kind == "propose":
            self.inject(*ev.args)
        elif ev.kind == "crash":
            self.crash(ev.args[0])
        elif ev.kind == "restart":
            self.restart(ev.args[0])
        elif ev.kind == "checkpoint":
            node = self.nodes[ev.args[0]]
            if self.up[ev.args[0]] and node.replica is not None and not node.replica.recovering:
                node.replica.checkpoint()
        elif ev.kind == "trim":
            ring = self.cfg.ring(ev.args[0])
            node = self.nodes[ring.coordinator]
            if self.up[ring.coordinator]:
                node.rings[ring.group].on_trim_timer()
                node.flush()

    def step(self) -> bool:
        if not self._queue:
            return False
        t, _, kind, data = heapq.heappop(self._queue)
        if kind == "msg":
            src, dst, env, cost = data
            busy = self.busy_until.get(dst, 0)
            if busy > t:
                self._push(busy, kind, data)
                return True
            self.now_us = t
            self.events_processed += 1
            if not self.up.get(dst):
                return True
            self.busy_until[dst] = t + cost
            self.nodes[dst].deliver(src, env)
            return True
        self.now_us = max(self.now_us, t)
        self.events_processed += 1
        if kind == "timer":
            pid, epoch, fn = data
            if self.up.get(pid) and self.epoch[pid] == epoch:
                fn()
        elif kind == "reply":
            src, client, env = data
            handler = self.clients.get(client)
            if handler is not None:
                handler(src, env)
        elif kind == "script":
            self._script(data)
        elif kind == "call":
            data()
        return True

    def run_until(self, t_ms: float, max_events: int | None = None) -> None:
        limit = int(t_ms * 1000)
        start = self.events_processed
        while self._queue and self._queue[0][0] <= limit:
            self.step()
            if max_events is not None and self.events_processed - start > max_events:
                raise StepBoundExceeded(f"more than {max_events} events before t={t_ms}ms",
                                        self.trace)
        self.now_us = max(self.now_us, limit)

    # --- observation ---------------------------------------------------------------------

    def delivered(self, pid: int) -> list[tuple[int, int]]:
        """Message ids delivered by the current incarnation's state, in order."""
        node = self.nodes[pid]
        svc = node.replica.service
        if isinstance(svc, RecordingService):
            return [(o, s) for kind, _g, o, s in svc.log if kind == "m"]
        raise TypeError("delivered() needs the recording service")

    def settled(self) -> bool:
        """Every message delivered anywhere, or injected by a proposer that has
        not crashed since, is delivered by every live replica of its group."""
        live = [p for p, n in self.nodes.items() if self.up[p] and n.replica is not None]
        if any(self.nodes[p].replica.recovering for p in live):
            return False
        expected: dict[int, set] = {}
        for pid, epoch, group, mid in self.injected:
            # a proposer that crashed since may have lost the message
            if self.up.get(pid) and self.epoch[pid] == epoch:
                expected.setdefault(group, set()).add(mid)
        seen = {}
        for p in live:
            rep = self.nodes[p].replica
            got = set()
            for kind, g, o, s in rep.service.log:
                if kind == "m":
                    got.add((o, s))
                    expected.setdefault(g, set()).add((o, s))
            seen[p] = got
        for p in live:
            for g in self.nodes[p].replica.groups:
                if not expected.get(g, set()) <= seen[p]:
                    return False
        return True

    def run_to_quiescence(self, max_time_ms: float, max_events: int = 5_000_000,
                          check_every_ms: float = 2.0) -> None:
        """Run past the last scripted event until :meth:`settled`; raise on budget exhaustion."""
        last_script = max((e[0] for e in self._queue if e[2] == "script"), default=0)
        t = max(self.now_us, last_script) / 1000.0
        self.run_until(t, max_events)
        start = self.events_processed
        while not self.settled():
            if self.now_us / 1000.0 >= max_time_ms:
                raise StepBoundExceeded(f"not settled by t={max_time_ms}ms", self.trace)
            if self.events_processed - start > max_events:
                raise StepBoundExceeded(f"not settled within {max_events} events", self.trace)
            t += check_every_ms
            self.run_until(t)


def sim_run(cfg: ClusterConfig, workload: Iterable[SimEvent] | str, seed: int = 0,
            max_time_ms: float = 60_000, max_events: int = 5_000_000,
            params: SimParams | None = None) -> Trace:
    """Run a scripted workload to quiescence and return the trace."""
    if isinstance(workload, str):
        workload = parse_workload(workload)
    net = SimNet(cfg, seed, params=params)
    net.schedule(workload)
    net.run_to_quiescence(max_time_ms, max_events)
    return net.trace
