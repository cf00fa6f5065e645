"""One Ring Paxos instance as seen from a single process.

Messages travel along the ring in member order.  The coordinator assigns
instances and emits a combined Phase 2A/2B message carrying its own vote; every
acceptor downstream adds its vote; the last live acceptor before the ring wraps
back to the coordinator turns a quorum of votes into a decision, which then
circulates until every live member has seen it.

Crashed members are routed around (the runtime reports liveness), standing in
for the external ring-management service of a production deployment.
"""

from __future__ import annotations

import logging
from collections import deque
from typing import TYPE_CHECKING, Callable

from sortedcontainers import SortedDict

from mrpaxos.core import ClusterConfig, RingConfig, Role
from mrpaxos.messages import (
    Ballot,
    Decision,
    Message,
    Phase1Message,
    Phase2Message,
    ProposedValue,
    RT_END,
    RT_REQUEST,
    RT_TRIMMED,
    Retransmit,
    decode_propose,
    decode_trim,
    decode_trim_reply,
    encode_propose,
    encode_trim,
    encode_trim_query,
)
from mrpaxos.multiring import SkipPolicy, rate_level_tick
from mrpaxos.recovery import (
    AcceptorLogState,
    StableLog,
    _drop_trimmed,
    decide_trim,
    trim_quorum_complete,
)
from mrpaxos.transport.codec import Envelope, MsgType

if TYPE_CHECKING:
    from mrpaxos.node import Node

log = logging.getLogger(__name__)

__all__ = [
    "Acceptor", "Ballot", "Coordinator", "Decision", "Phase2Message", "ProposedValue",
    "Proposer", "RingProcess", "OversizeValue",
]

RETRANSMIT_BATCH = 256


class OversizeValue(ValueError):
    pass


class Acceptor:
    """Votes, promises and decided marks for one ring, backed by a stable log."""

    def __init__(self, stable_log: StableLog, slots: int):
        self.log = stable_log
        self.slots = slots
        self.full = False
        st = stable_log.load()
        self.promised: Ballot | None = st.promised
        self.window_end = st.window_end
        self.votes: SortedDict = SortedDict(st.votes)
        self.decided: set[int] = set(st.decided)
        self.trim_point = st.trim_point
        self.frontier = self.trim_point + 1
        if self.votes and self.frontier < self.votes.keys()[0]:
            # records covering the trim point may start below it
            self.frontier = self.votes.keys()[0]
        self._advance_frontier()
        self.restarted = bool(st.votes or st.promised)

    def _advance_frontier(self) -> None:
        while self.frontier in self.decided:
            self.frontier += self.votes[self.frontier][1].span

    def on_phase1(self, m: Phase1Message) -> Phase1Message:
        if self.promised is not None and m.ballot < self.promised:
            return m
        self.promised = m.ballot
        self.window_end = max(self.window_end, m.end)
        self.log.promise(m.start, m.end, m.ballot)
        accepted = tuple((i, b, v) for i, (b, v) in self.votes.items()
                         if i >= m.start or i + v.span > m.start)
        return Phase1Message(m.ballot, m.start, m.end, m.promises + 1, m.accepted + accepted,
                             max(m.floor, self.trim_point))

    def on_phase2(self, m: Phase2Message) -> Phase2Message:
        """Vote when allowed; otherwise return the message unchanged."""
        if self.promised is not None and m.ballot < self.promised:
            return m
        if m.instance <= self.trim_point:
            return m
        prev = self.votes.get(m.instance)
        if m.instance in self.decided:
            # re-proposal of a chosen value after a coordinator restart
            return m.with_vote() if prev[1].value_id() == m.value_id else m
        if prev is not None and prev[0] == m.ballot and prev[1].value_id() != m.value_id:
            # one value per ballot and instance, even across our own restarts
            log.warning("refusing a second value for instance %d at %s", m.instance, m.ballot)
            return m
        if prev is None and len(self.votes) >= self.slots:
            if not self.full:
                log.warning("acceptor buffer full (%d slots), not voting until a trim", self.slots)
            self.full = True
            return m
        self.full = False
        if prev is None or prev[0] != m.ballot:
            self.votes[m.instance] = (m.ballot, m.value)
            self.log.vote(m.instance, m.ballot, m.value)
        if self.promised is None or m.ballot > self.promised:
            self.promised = m.ballot
        return m.with_vote()

    def on_decision(self, d: Decision) -> None:
        if d.instance <= self.trim_point or d.instance in self.decided:
            return
        prev = self.votes.get(d.instance)
        if prev is not None and prev[1].value_id() == d.value.value_id():
            self.log.decide(d.instance, prev[0])
        else:
            if prev is None and len(self.votes) >= self.slots:
                return
            self.votes[d.instance] = (d.ballot, d.value)
            self.log.decide(d.instance, d.ballot, d.value)
        self.decided.add(d.instance)
        self._advance_frontier()

    def serve(self, start: int, end: int, limit: int = RETRANSMIT_BATCH):
        """Decided values covering ``[start, end]``; stops at the first unknown instance.

        Returns ``(decisions, status)`` with status ``RT_TRIMMED`` or ``(RT_END, next)``.
        """
        if start <= self.trim_point:
            return [], (RT_TRIMMED, self.trim_point)
        idx = self.votes.bisect_right(start) - 1
        expected = start
        if idx >= 0:
            first = self.votes.keys()[idx]
            if first + self.votes[first][1].span > start:
                expected = first
        out = []
        for inst in self.votes.irange(expected, end):
            if inst != expected or inst not in self.decided or len(out) >= limit:
                break
            b, v = self.votes[inst]
            out.append(Decision(inst, b, v, retransmit=True))
            expected = inst + v.span
        return out, (RT_END, expected)

    def trim(self, point: int) -> bool:
        if point <= self.trim_point:
            return False
        self.trim_point = point
        _drop_trimmed(self.votes, self.decided, point)
        if self.frontier <= point:
            self.frontier = point + 1
            if self.votes and self.votes.keys()[0] < self.frontier:
                self.frontier = self.votes.keys()[0]
            self._advance_frontier()
        self.log.compact(AcceptorLogState(self.promised, self.window_end, dict(self.votes),
                                          set(self.decided), point))
        return True

    @property
    def gap(self) -> bool:
        return bool(self.votes) and self.votes.keys()[-1] >= self.frontier


class Proposer:
    """Keeps proposals until they are seen decided, resending on timeout."""

    def __init__(self, ring: "RingProcess"):
        self.ring = ring
        self.pending: dict[tuple[int, int], tuple[Message, float]] = {}

    def propose(self, msg: Message) -> None:
        limit = self.ring.tuning.batch_limit
        if len(msg.payload) > limit:
            raise OversizeValue(f"command of {len(msg.payload)} bytes exceeds batch limit {limit}")
        self.pending[msg.mid] = (msg, self.ring.now())
        self.ring.route_proposal(msg)

    def on_decided(self, value: ProposedValue) -> None:
        for m in value.messages:
            self.pending.pop(m.mid, None)

    def retry(self) -> None:
        now = self.ring.now()
        timeout = self.ring.tuning.retry_ms / 1000.0
        for mid, (msg, sent) in list(self.pending.items()):
            if now - sent >= timeout:
                self.pending[mid] = (msg, now)
                self.ring.route_proposal(msg)


class Coordinator:
    def __init__(self, ring: "RingProcess", acceptor: Acceptor):
        self.ring = ring
        self.acceptor = acceptor
        t = ring.tuning
        self.window = t.phase1_window
        self.ballot: Ballot | None = None
        self.ready = False
        self.next_instance = 0
        self.window_end = 0
        self.queue: deque[Message] = deque()
        self.known: set[tuple[int, int]] = set()
        self.inflight: dict[int, tuple[Phase2Message, float]] = {}
        self.skip = SkipPolicy(t.delta_ms, t.max_rate)
        self.phase1: tuple[Phase1Message, float, bool] | None = None
        self.trim_round = 0
        self.trim_replies: dict[int, int] | None = None
        self.last_trim = acceptor.trim_point

    # --- phase 1 -------------------------------------------------------------

    def start(self) -> None:
        acc = self.acceptor
        pid = self.ring.pid
        # the incarnation counter is always durable, so a restarted coordinator
        # never reuses a ballot even if an unsynced log lost its promises
        floor = self.ring.node.incarnation - 1
        if acc.promised is None:
            self.ballot = Ballot(floor, pid)
            start = acc.frontier
        else:
            self.ballot = Ballot(max(acc.promised.round + 1, floor), pid)
            start = acc.frontier
        self.next_instance = start
        self._run_phase1(start, start + self.window, recovering=acc.restarted or floor > 0)

    def _run_phase1(self, start: int, end: int, recovering: bool) -> None:
        m = Phase1Message(self.ballot, start, end)
        self.phase1 = (m, self.ring.now(), recovering)
        self.ring.trace("phase1", self.ring.group, self.ballot.round, start, end)
        self.ring.circulate_phase1(m)

    def on_phase1b(self, m: Phase1Message) -> None:
        if self.phase1 is None or m.ballot != self.ballot or m.start != self.phase1[0].start:
            return
        recovering = self.phase1[2]
        self.phase1 = None
        if m.promises < self.ring.config.quorum_size:
            # the retry timer re-runs it with a higher ballot
            self.phase1 = (Phase1Message(self.ballot, m.start, m.end), self.ring.now(), recovering)
            return
        self.window_end = max(self.window_end, m.end)
        if recovering:
            self._repropose(m)
        self.ready = True
        self.pump()

    def _retry_phase1(self, start: int, end: int, recovering: bool) -> None:
        promised = self.acceptor.promised or self.ballot
        self.ballot = Ballot(max(self.ballot.round, promised.round) + 1, self.ring.pid)
        self.ready = False
        # in-flight 2A messages carry the old ballot; re-run them once phase 1 succeeds
        self._run_phase1(min(start, self._lowest_inflight(start)), end, recovering=True)

    def _lowest_inflight(self, default: int) -> int:
        return min(self.inflight, default=default)

    def _repropose(self, m: Phase1Message) -> None:
        best: dict[int, tuple[Ballot, ProposedValue]] = {}
        for inst, b, v in m.accepted:
            if inst not in best or b > best[inst][0]:
                best[inst] = (b, v)
        self.inflight.clear()
        j = max(m.start, m.floor + 1)
        # a value chosen below the phase 1 start may cover it (a skip)
        for inst in sorted(best):
            b, v = best[inst]
            if inst < j < inst + v.span:
                j = inst + v.span
        best = {i: bv for i, bv in best.items() if i >= j}
        top = max((i + v.span for i, (_, v) in best.items()), default=j)
        while j < top:
            if j in best:
                value = best[j][1]
            else:
                value = ProposedValue.skip(1)
            self._assign_at(j, value)
            j += value.span
        self.next_instance = max(self.next_instance, j)

    # --- phase 2 -----------------------------------------------------------------

    def enqueue(self, msg: Message) -> None:
        if msg.mid in self.known:
            return
        self.known.add(msg.mid)
        self.queue.append(msg)

    def pump(self) -> None:
        if not self.ready:
            return
        t = self.ring.tuning
        while self.queue and len(self.inflight) < t.max_inflight and self._window_ok():
            batch, size = [], 0
            while self.queue and (not batch or size + len(self.queue[0].payload) <= t.batch_limit):
                m = self.queue.popleft()
                batch.append(m)
                size += len(m.payload)
            self.assign(ProposedValue.app(batch))

    def _window_ok(self) -> bool:
        if self.next_instance >= self.window_end - self.window // 4 and self.phase1 is None:
            self._run_phase1(self.window_end, self.window_end + self.window, recovering=False)
        return self.next_instance < self.window_end

    def assign(self, value: ProposedValue, count: bool = True) -> int:
        inst = self.next_instance
        self.next_instance += value.span
        if count:
            self.skip.record(value.span)
        self._assign_at(inst, value)
        return inst

    def _assign_at(self, inst: int, value: ProposedValue) -> None:
        m = Phase2Message(inst, self.ballot, value, 0)
        self.inflight[inst] = (m, self.ring.now())
        self.ring.trace("assign", self.ring.group, inst, value.is_skip, value.span)
        self.ring.start_phase2(m)

    def on_decided(self, d: Decision) -> None:
        self.inflight.pop(d.instance, None)
        for msg in d.value.messages:
            self.known.discard(msg.mid)

    def retry(self) -> None:
        now = self.ring.now()
        timeout = self.ring.tuning.retry_ms / 1000.0
        if self.phase1 is not None and now - self.phase1[1] >= timeout:
            m, _, recovering = self.phase1
            self.phase1 = None
            self._retry_phase1(m.start, m.end, recovering)
            return
        if not self.ready:
            return
        for inst, (m, sent) in sorted(self.inflight.items()):
            if now - sent >= timeout:
                fresh = Phase2Message(inst, self.ballot, m.value, 0)
                self.inflight[inst] = (fresh, now)
                self.ring.start_phase2(fresh)

    def rate_level(self) -> None:
        if not self.ready or not self.ring.tuning.rate_leveling:
            self.skip.proposed_in_interval = 0
            return
        v = rate_level_tick(self.skip)
        if v is not None and self._window_ok():
            self.assign(v, count=False)

    # --- trimming ----------------------------------------------------------------

    def trim_tick(self) -> None:
        learners = self.ring.cluster.learners_of(self.ring.group)
        if not learners:
            return
        self.trim_round += 1
        self.trim_replies = {}
        payload = encode_trim_query(self.trim_round)
        for pid in learners:
            self.ring.send(pid, MsgType.TRIM_QUERY, payload)

    def on_trim_reply(self, src: int, round_no: int, k: int) -> None:
        if round_no != self.trim_round or self.trim_replies is None:
            return
        self.trim_replies[src] = k
        parts = [p.replicas for p in self.ring.cluster.partitions_of_group(self.ring.group)]
        if not trim_quorum_complete(self.trim_replies, parts):
            return
        dec = decide_trim(self.ring.group, self.trim_replies)
        self.trim_replies = None
        self.ring.trace("trim", self.ring.group, dec.trim_point, tuple(sorted(dec.quorum.items())))
        if dec.trim_point > self.last_trim:
            self.last_trim = dec.trim_point
            payload = encode_trim(dec.trim_point)
            for pid in sorted(self.ring.config.acceptors):
                self.ring.send(pid, MsgType.TRIM, payload)


class RingProcess:
    """All roles one process plays in one ring, plus message routing."""

    def __init__(self, node: "Node", ring: RingConfig, stable_log: StableLog | None):
        self.node = node
        self.config = ring
        self.cluster: ClusterConfig = node.cfg
        self.tuning = node.cfg.tuning
        self.group = ring.group
        self.pid = node.pid
        roles = node.cfg.process(node.pid).roles
        self.acceptor = Acceptor(stable_log, self.tuning.buffer_slots) \
            if node.pid in ring.acceptors else None
        self.coordinator = Coordinator(self, self.acceptor) \
            if node.pid == ring.coordinator else None
        self.proposer = Proposer(self) if Role.PROPOSER in roles else None
        self.learner = self.group in node.cfg.process(node.pid).subscriptions
        self._rt_rotation = 0
        self._last_catchup = -1e9

    # --- plumbing --------------------------------------------------------------

    def now(self) -> float:
        return self.node.runtime.now()

    def trace(self, kind: str, *data) -> None:
        self.node.trace(kind, *data)

    def send(self, dst: int, msg_type: MsgType, payload: bytes, origin: int | None = None) -> None:
        env = Envelope(msg_type, self.group, self.pid if origin is None else origin, payload)
        if dst == self.pid:
            self.node.local(env)
        else:
            self.node.send(dst, env)

    def is_up(self, pid: int) -> bool:
        return pid == self.pid or self.node.runtime.is_up(pid)

    def _members_after(self, pid: int):
        ring = self.config.members
        start = ring.index(pid)
        for i in range(1, len(ring)):
            yield ring[(start + i) % len(ring)]

    def next_up(self) -> int | None:
        for p in self._members_after(self.pid):
            if self.is_up(p):
                return p
        return None

    def is_last_acceptor(self) -> bool:
        """No live acceptor sits between us and the coordinator in ring order."""
        coord = self.config.coordinator
        if self.pid == coord:
            return not any(p in self.config.acceptors and self.is_up(p)
                           for p in self._members_after(self.pid))
        for p in self._members_after(self.pid):
            if p == coord:
                return True
            if p in self.config.acceptors and self.is_up(p):
                return False
        return True

    # --- proposals ---------------------------------------------------------------

    def route_proposal(self, msg: Message) -> None:
        if self.coordinator is not None:
            self.coordinator.enqueue(msg)
            return
        if not self.is_up(self.config.coordinator):
            return
        nxt = self.next_up()
        if nxt is not None:
            self.send(nxt, MsgType.PROPOSE, encode_propose(msg), origin=msg.origin)

    # --- phase 1 ---------------------------------------------------------------------

    def circulate_phase1(self, m: Phase1Message) -> None:
        self._on_phase1(m)

    def _on_phase1(self, m: Phase1Message) -> None:
        if self.acceptor is not None:
            m = self.acceptor.on_phase1(m)
            if self.is_last_acceptor():
                self.send(self.config.coordinator, MsgType.PHASE1B, m.encode())
                return
        nxt = self.next_up()
        if nxt is not None and nxt != self.config.coordinator:
            self.send(nxt, MsgType.PHASE1A, m.encode(), origin=self.config.coordinator)

    # --- phase 2 and decisions -----------------------------------------------------------

    def start_phase2(self, m: Phase2Message) -> None:
        self._on_phase2(m)

    def _on_phase2(self, m: Phase2Message) -> None:
        if self.acceptor is not None:
            m = self.acceptor.on_phase2(m)
            if self.is_last_acceptor():
                if m.votes >= self.config.quorum_size:
                    d = Decision(m.instance, m.ballot, m.value)
                    self.trace("decide", self.group, m.instance, m.value_id)
                    self.learn(d)
                    self._forward_decision(d, origin=self.pid)
                return
        nxt = self.next_up()
        if nxt is not None and nxt != self.config.coordinator:
            self.send(nxt, MsgType.PHASE2, m.encode(), origin=self.config.coordinator)

    def _forward_decision(self, d: Decision, origin: int) -> None:
        for p in self._members_after(self.pid):
            if p == origin:
                return
            if self.is_up(p):
                self.send(p, MsgType.DECISION, d.encode(), origin=origin)
                return

    def learn(self, d: Decision) -> None:
        if self.acceptor is not None:
            self.acceptor.on_decision(d)
        if self.coordinator is not None:
            self.coordinator.on_decided(d)
        if self.proposer is not None:
            self.proposer.on_decided(d.value)
        if self.learner:
            self.node.on_ring_decision(self.group, d)

    # --- dispatch ---------------------------------------------------------------------

    def handle(self, src: int, env: Envelope) -> None:
        t = env.msg_type
        if t == MsgType.PHASE2:
            self._on_phase2(Phase2Message.decode(env.payload))
        elif t == MsgType.DECISION:
            d = Decision.decode(env.payload)
            self.learn(d)
            if not d.retransmit:
                self._forward_decision(d, origin=env.origin)
        elif t == MsgType.PROPOSE:
            self.route_proposal(decode_propose(env.payload))
        elif t == MsgType.PHASE1A:
            self._on_phase1(Phase1Message.decode(env.payload))
        elif t == MsgType.PHASE1B:
            if self.coordinator is not None:
                self.coordinator.on_phase1b(Phase1Message.decode(env.payload))
        elif t == MsgType.RETRANSMIT:
            self._on_retransmit(src, Retransmit.decode(env.payload))
        elif t == MsgType.TRIM:
            if self.acceptor is not None and self.acceptor.trim(decode_trim(env.payload)):
                self.trace("acceptor_trim", self.group, self.acceptor.trim_point)
        elif t == MsgType.TRIM_REPLY:
            if self.coordinator is not None:
                self.coordinator.on_trim_reply(src, *decode_trim_reply(env.payload))
        else:
            log.debug("ring %d: unexpected %s from %d", self.group, t.name, src)

    def _on_retransmit(self, src: int, r: Retransmit) -> None:
        if r.kind == RT_REQUEST:
            if self.acceptor is None:
                return
            decisions, (status, nxt) = self.acceptor.serve(r.start, r.end)
            for d in decisions:
                self.send(src, MsgType.DECISION, d.encode())
            self.send(src, MsgType.RETRANSMIT, Retransmit(status, nxt, r.end).encode())
        elif r.kind == RT_TRIMMED:
            self.node.on_trimmed(self.group, r)
        # RT_END needs no action: the periodic gap check asks someone else

    def request_retransmit(self, start: int, end: int) -> None:
        """Ask the acceptors in rotation, coordinator first."""
        accs = [a for a in self.config.ordered_acceptors() if a != self.pid and self.is_up(a)]
        if not accs:
            return
        dst = accs[self._rt_rotation % len(accs)]
        self._rt_rotation += 1
        self.send(dst, MsgType.RETRANSMIT, Retransmit(RT_REQUEST, start, end).encode())

    # --- timers -------------------------------------------------------------------------

    def start(self) -> None:
        if self.coordinator is not None:
            self.coordinator.start()

    def on_retry_timer(self) -> None:
        if self.coordinator is not None:
            self.coordinator.retry()
        if self.proposer is not None:
            self.proposer.retry()
        acc = self.acceptor
        if acc is not None and self.coordinator is None and acc.gap:
            # fill decisions missed while down so this acceptor can serve them later
            last = acc.votes.keys()[-1]
            self.request_retransmit(acc.frontier, last + acc.votes[last][1].span - 1)

    def on_delta_timer(self) -> None:
        if self.coordinator is not None:
            self.coordinator.rate_level()

    def on_trim_timer(self) -> None:
        if self.coordinator is not None:
            self.coordinator.trim_tick()

    def pump(self) -> None:
        if self.coordinator is not None:
            self.coordinator.pump()


CallbackT = Callable[[], None]
