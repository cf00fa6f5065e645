"""Closed-loop clients that run inside the simulator and record their history."""

from __future__ import annotations

from typing import Callable, Iterable

from mrpaxos.messages import ClientReply
from mrpaxos.services import kv
from mrpaxos.services.client import ClientCore, Pending, kv_plan, kv_result
from mrpaxos.services.seqcheck import HistOp
from mrpaxos.transport.codec import Envelope, MsgType
from mrpaxos.transport.simnet import SimNet

CLIENT_BASE = 1000


class SimClient:
    def __init__(self, net: SimNet, client_id: int, timeout_ms: float = 200.0):
        if client_id < CLIENT_BASE:
            raise ValueError(f"client ids start at {CLIENT_BASE}")
        self.net = net
        self.id = client_id
        self.core = ClientCore(client_id, timeout_ms / 1000.0)
        self._rr = 0
        self.retries = 0
        self._ticking = False
        net.register_client(client_id, self._on_reply)

    def now(self) -> float:
        return self.net.now_us / 1e6

    def submit(self, target: int, command: bytes, needed, on_done=None, meta=None) -> Pending:
        p = self.core.submit(target, command, needed, self.now(), on_done, meta)
        self._send(p)
        self._arm()
        return p

    def _send(self, p: Pending) -> None:
        cands = [q for q in self.net.cfg.proposers_of(p.target) if self.net.up.get(q)]
        if not cands:
            return
        dst = cands[self._rr % len(cands)]
        self._rr += 1
        env = Envelope(MsgType.CLIENT_REQUEST, p.target, 0, p.request.encode())
        self.net.client_send(self.id, dst, env)

    def _arm(self) -> None:
        if self._ticking:
            return
        self._ticking = True
        self.net.call_at(self.net.now_us / 1000.0 + self.core.timeout * 500, self._tick)

    def _tick(self) -> None:
        self._ticking = False
        for p in self.core.due(self.now()):
            self.retries += 1
            self._send(p)
        if self.core.pending:
            self._arm()

    def _on_reply(self, src: int, env: Envelope) -> None:
        self.core.on_reply(ClientReply.decode(env.payload))


class KvSimClient(SimClient):
    """Runs a fixed program of key-value commands one at a time."""

    def __init__(self, net: SimNet, client_id: int, pmap: kv.PartitionMap,
                 program: Iterable[kv.KvCommand], start_ms: float = 0.0,
                 think_ms: float = 0.0, timeout_ms: float = 200.0,
                 on_result: Callable | None = None):
        super().__init__(net, client_id, timeout_ms)
        self.pmap = pmap
        self.program = list(program)
        self.history: list[HistOp] = []
        self.latencies: list[float] = []
        self.think_ms = think_ms
        self.on_result = on_result
        self._next = 0
        net.call_at(start_ms, self._issue)

    @property
    def finished(self) -> bool:
        return self._next >= len(self.program) and not self.core.pending

    def _issue(self) -> None:
        if self._next >= len(self.program):
            return
        cmd = self.program[self._next]
        self._next += 1
        target, needed = kv_plan(self.pmap, cmd)
        self.submit(target, cmd.encode(), needed, self._done, meta=(cmd, self.net.now_us))

    def _done(self, p: Pending) -> None:
        cmd, started = p.meta
        status, value = kv_result(cmd, p)
        self.history.append(HistOp(self.id, cmd, status, value))
        self.latencies.append((self.net.now_us - started) / 1000.0)
        if self.on_result is not None:
            self.on_result(self, cmd, status, value)
        self.net.call_at(self.net.now_us / 1000.0 + self.think_ms, self._issue)
