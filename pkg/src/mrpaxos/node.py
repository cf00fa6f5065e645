"""A cluster process, independent of how messages and timers are delivered.

The runtime (simulator or TCP) calls :meth:`Node.start`, :meth:`Node.deliver`
and fires timers registered through ``runtime.call_later``; after each of those
it calls :meth:`Node.flush`.  Outgoing messages wait in an outbox until flush
has made every logged record durable, so one fsync covers all messages
produced by one event (group commit).
"""

from __future__ import annotations

import json
import logging
import struct
from collections import deque
from typing import Callable, Protocol

from mrpaxos.core import ClusterConfig, partition_of, reply_partition
from mrpaxos.messages import (
    ClientReply,
    ClientRequest,
    Decision,
    Message,
    Retransmit,
    decode_ckpt_chunk,
    decode_ckpt_fetch,
    decode_ckpt_query,
    decode_ckpt_reply,
    decode_trim_query,
    encode_ckpt_chunk,
    encode_ckpt_fetch,
    encode_ckpt_query,
    encode_ckpt_reply,
    encode_trim_reply,
)
from mrpaxos.multiring import BLOCKED, DecidedQueue, Delivery, MergeCursor, merge_next
from mrpaxos.recovery import (
    Checkpoint,
    CheckpointStore,
    ProtocolViolation,
    StableLog,
    chunk,
    compare_ids,
    empty_id,
    select_recovery_source,
    take_checkpoint,
)
from mrpaxos.ring import RETRANSMIT_BATCH, RingProcess
from mrpaxos.services.base import Service
from mrpaxos.storage import Disk
from mrpaxos.transport.codec import Envelope, MsgType

log = logging.getLogger(__name__)

RAW = 0
CLIENT = 1
_CLIENT_HDR = struct.Struct(">BIQ")
SEQ_BITS = 40
REPLY_CACHE = 256


class Runtime(Protocol):
    def now(self) -> float: ...
    def send(self, dst: int, env: Envelope) -> None: ...
    def reply(self, client: int, env: Envelope) -> None: ...
    def call_later(self, delay: float, fn: Callable[[], None]) -> object: ...
    def is_up(self, pid: int) -> bool: ...
    def trace(self, kind: str, *data) -> None: ...


def wrap_client(client: int, cseq: int, command: bytes) -> bytes:
    return _CLIENT_HDR.pack(CLIENT, client, cseq) + command


def unwrap(payload: bytes):
    """``(None, payload)`` for raw multicasts, else ``((client, cseq), command)``."""
    if payload[:1] == bytes([CLIENT]):
        _, client, cseq = _CLIENT_HDR.unpack_from(payload)
        return (client, cseq), payload[_CLIENT_HDR.size:]
    return None, payload[1:]


class DeliveredSet:
    """Ids of delivered messages: a contiguous watermark per sender incarnation plus stragglers."""

    def __init__(self):
        self.low: dict[tuple[int, int], int] = {}
        self.extra: dict[tuple[int, int], set[int]] = {}

    def add(self, mid: tuple[int, int]) -> bool:
        origin, seq = mid
        key = (origin, seq >> SEQ_BITS)
        ctr = seq & ((1 << SEQ_BITS) - 1)
        low = self.low.get(key, 0)
        extra = self.extra.setdefault(key, set())
        if ctr <= low or ctr in extra:
            return False
        extra.add(ctr)
        while low + 1 in extra:
            low += 1
            extra.discard(low)
        self.low[key] = low
        return True

    def to_json(self):
        return [[k[0], k[1], self.low.get(k, 0), sorted(self.extra.get(k, ()))]
                for k in sorted(set(self.low) | set(self.extra))]

    @classmethod
    def from_json(cls, data) -> "DeliveredSet":
        d = cls()
        for origin, inc, low, extra in data:
            d.low[(origin, inc)] = low
            d.extra[(origin, inc)] = set(extra)
        return d


class Replica:
    """Learner side of a process: merge, execute, checkpoint, recover."""

    def __init__(self, node: "Node", service: Service):
        self.node = node
        cfg = node.cfg
        self.groups = sorted(cfg.process(node.pid).subscriptions)
        self.partition = partition_of(node.pid, cfg)
        self.peers = sorted(self.partition.replicas - {node.pid})
        self.partition_id = reply_partition(cfg, node.pid)
        self.m = cfg.tuning.merge_window
        self.service = service
        self.store = CheckpointStore(node.disk)
        self.queues = {g: DecidedQueue(g) for g in self.groups}
        self.cursor = MergeCursor(list(self.groups), self.m)
        self.delivered = DeliveredSet()
        self.replies: dict[int, dict[int, tuple[int, bytes]]] = {}
        self.count = 0
        self.since_ckpt = 0
        self.recovering = True
        self.nonce = node.incarnation << 16
        self.rec_replies: dict[int, tuple] = {}
        self.rec_target: tuple[int, tuple] | None = None
        self.rec_chunks: dict[int, bytes] = {}
        self.rec_started = 0.0
        self._last_progress = (None, 0.0)

    # --- state -----------------------------------------------------------------

    def own_id(self) -> tuple:
        ck = self.store.latest
        return ck.id if ck is not None else empty_id(self.groups)

    def state_blob(self) -> bytes:
        meta = {
            "cursor": list(self.cursor.snapshot()),
            "delivered": self.delivered.to_json(),
            "replies": [[c, [[s, st, b.hex()] for s, (st, b) in sorted(r.items())]]
                        for c, r in sorted(self.replies.items())],
            "count": self.count,
        }
        raw = json.dumps(meta, separators=(",", ":")).encode()
        return struct.pack(">I", len(raw)) + raw + self.service.snapshot()

    def load_blob(self, blob: bytes | None) -> None:
        if blob is None:
            self.cursor = MergeCursor(list(self.groups), self.m)
            self.delivered = DeliveredSet()
            self.replies = {}
            self.count = 0
            self.service.restore(None)
            return
        (n,) = struct.unpack_from(">I", blob)
        meta = json.loads(blob[4:4 + n])
        groups, m, index, in_turn, nexts = meta["cursor"]
        self.cursor = MergeCursor.restore((tuple(groups), m, index, in_turn, tuple(nexts)))
        self.delivered = DeliveredSet.from_json(meta["delivered"])
        self.replies = {c: {s: (st, bytes.fromhex(b)) for s, st, b in r}
                        for c, r in meta["replies"]}
        self.count = meta["count"]
        self.service.restore(blob[4 + n:])

    def checkpoint(self) -> Checkpoint:
        ck = take_checkpoint(self.state_blob(), self.cursor)
        self.store.save(ck)
        self.since_ckpt = 0
        self.node.trace("checkpoint", ck.id, self.count, self.service.digest())
        return ck

    # --- delivery -----------------------------------------------------------------

    def on_decision(self, group: int, d: Decision) -> None:
        if self.queues[group].add(d.instance, d.value):
            self.node.trace("learn", group, d.instance, d.value.value_id())
        if not self.recovering:
            self.drain()

    def drain(self) -> None:
        interval = self.node.cfg.tuning.checkpoint_interval
        while True:
            item = merge_next(self.cursor, self.queues)
            if item is BLOCKED:
                return
            if isinstance(item, Delivery):
                for msg in item.value.messages:
                    self._deliver(item.group, item.instance, msg)
            self.since_ckpt += 1
            if self.since_ckpt >= interval:
                self.checkpoint()

    def _deliver(self, group: int, instance: int, msg: Message) -> None:
        if not self.delivered.add(msg.mid):
            return
        self.count += 1
        self.node.trace("deliver", group, instance, self.count, msg.mid)
        client, body = unwrap(msg.payload)
        if client is None:
            self.service.deliver_raw(group, msg.mid, body)
            return
        cid, cseq = client
        cache = self.replies.setdefault(cid, {})
        if cseq in cache:
            status, out = cache[cseq]
        else:
            status, out = self.service.execute(group, cid, cseq, body)
            cache[cseq] = (status, out)
            if len(cache) > REPLY_CACHE:
                del cache[min(cache)]
        rep = ClientReply(cseq, self.partition_id, status, out)
        self.node.outbox.append((True, cid, Envelope(MsgType.CLIENT_REPLY, group,
                                                      self.node.pid, rep.encode())))

    # --- recovery --------------------------------------------------------------------

    def start_recovery(self, reason: str) -> None:
        self.recovering = True
        self.nonce += 1
        self.rec_replies = {self.node.pid: self.own_id()}
        self.rec_target = None
        self.rec_chunks = {}
        self.rec_started = self.node.runtime.now()
        self.node.trace("recovery_start", reason, self.nonce)
        for p in self.peers:
            self.node.send_to(p, MsgType.CKPT_QUERY, self.groups[0], encode_ckpt_query(self.nonce))
        self._maybe_choose()

    def _maybe_choose(self) -> None:
        if self.rec_target is not None or len(self.rec_replies) < self.partition.majority:
            return
        try:
            k_r, source = select_recovery_source(self.rec_replies)
        except ProtocolViolation as exc:
            self.node.trace("violation", str(exc))
            raise
        own = self.own_id()
        if k_r == own:
            self._install(self.store.latest, k_r, self.node.pid)
        else:
            self.rec_target = (source, k_r)
            self.node.send_to(source, MsgType.CKPT_FETCH, self.groups[0],
                              encode_ckpt_fetch(self.nonce, k_r))

    def _install(self, ck: Checkpoint | None, k_r: tuple, source: int) -> None:
        if not self.recovering:
            return
        live = self.cursor.checkpoint_id()
        if self.count and compare_ids(k_r, live) in (-1, 0, None):
            # running replica whose state is already at or past the chosen checkpoint
            self.node.trace("recover_noop", k_r, live)
        else:
            self.load_blob(ck.state if ck is not None else None)
            for g, q in self.queues.items():
                q.reset(self.cursor.next_instance[g])
            self.since_ckpt = 0
            self.node.trace("recover", k_r, source, self.count, self.service.digest())
        self.recovering = False
        self.drain()
        self.gap_check(force=True)

    def on_ckpt_query(self, src: int, env: Envelope) -> None:
        nonce = decode_ckpt_query(env.payload)
        self.node.send_to(src, MsgType.CKPT_REPLY, env.group, encode_ckpt_reply(nonce, self.own_id()))

    def on_ckpt_reply(self, src: int, env: Envelope) -> None:
        nonce, k = decode_ckpt_reply(env.payload)
        if not self.recovering or nonce != self.nonce:
            return
        self.rec_replies[src] = tuple(k)
        self._maybe_choose()

    def on_ckpt_fetch(self, src: int, env: Envelope) -> None:
        nonce, k = decode_ckpt_fetch(env.payload)
        ck, data = self.store.latest, self.store.encoded
        if ck is None or ck.id != tuple(k):
            return
        parts = chunk(data, self.node.cfg.tuning.slot_size)
        for i, part in enumerate(parts):
            self.node.send_to(src, MsgType.CKPT_CHUNK, env.group,
                              encode_ckpt_chunk(nonce, i, len(parts), part))

    def on_ckpt_chunk(self, src: int, env: Envelope) -> None:
        nonce, index, total, part = decode_ckpt_chunk(env.payload)
        if not self.recovering or nonce != self.nonce or self.rec_target is None \
                or src != self.rec_target[0]:
            return
        self.rec_chunks[index] = part
        if len(self.rec_chunks) < total:
            return
        data = b"".join(self.rec_chunks[i] for i in range(total))
        try:
            ck = Checkpoint.decode(data)
        except ValueError as exc:
            log.warning("bad checkpoint from %d: %s", src, exc)
            self.start_recovery("bad-checkpoint")
            return
        if ck.id != self.rec_target[1]:
            self.start_recovery("checkpoint-mismatch")
            return
        self.store.save(ck)
        self._install(ck, ck.id, src)

    def on_trim_query(self, src: int, env: Envelope) -> None:
        round_no = decode_trim_query(env.payload)
        k = dict(self.own_id()).get(env.group, -1)
        self.node.send_to(src, MsgType.TRIM_REPLY, env.group, encode_trim_reply(round_no, k))

    def on_trimmed(self, group: int, r: Retransmit) -> None:
        if self.recovering:
            return
        self.node.trace("trimmed", group, self.queues[group].next, r.start)
        self.start_recovery("trimmed")

    # --- timers ---------------------------------------------------------------------

    def on_timer(self) -> None:
        now = self.node.runtime.now()
        if self.recovering:
            if now - self.rec_started >= 2 * self.node.cfg.tuning.retry_ms / 1000.0:
                self.start_recovery("retry")
            return
        self.gap_check()

    def gap_check(self, force: bool = False) -> None:
        now = self.node.runtime.now()
        progress = tuple(self.cursor.next_instance[g] for g in self.groups)
        stalled = progress == self._last_progress[0]
        if not stalled:
            self._last_progress = (progress, now)
        for g, q in self.queues.items():
            ring = self.node.rings.get(g)
            if ring is None:
                continue
            if q.has_gap:
                ring.request_retransmit(q.next, q.highest_known - 1)
            elif (force or stalled) and g == self.cursor.current:
                ring.request_retransmit(q.next, q.next + RETRANSMIT_BATCH - 1)


class Node:
    def __init__(self, cfg: ClusterConfig, pid: int, runtime: Runtime, disk: Disk,
                 service: Service | None = None):
        self.cfg = cfg
        self.pid = pid
        self.runtime = runtime
        self.disk = disk
        raw = disk.read("incarnation")
        self.incarnation = (struct.unpack(">I", raw)[0] if raw else 0) + 1
        disk.replace("incarnation", struct.pack(">I", self.incarnation))
        self._seq = 0
        self.outbox: list[tuple[bool, int, Envelope]] = []
        self.local_queue: deque[Envelope] = deque()
        mode = cfg.tuning.log_mode
        self.rings: dict[int, RingProcess] = {}
        self.logs: list[StableLog] = []
        for ring in cfg.rings:
            if pid not in ring.members:
                continue
            slog = None
            if pid in ring.acceptors:
                slog = StableLog(disk, f"acceptor-{ring.group}.log", mode)
                self.logs.append(slog)
            self.rings[ring.group] = RingProcess(self, ring, slog)
        self.replica: Replica | None = None
        if cfg.process(pid).subscriptions:
            self.replica = Replica(self, service if service is not None else Service())
        self.stopped = False

    # --- lifecycle ------------------------------------------------------------------

    def start(self) -> None:
        self.trace("start", self.incarnation)
        for r in self.rings.values():
            r.start()
        if self.replica is not None:
            self.replica.start_recovery("start")
        t = self.cfg.tuning
        self.every(t.retry_ms / 1000.0, self._on_retry)
        if any(r.coordinator is not None for r in self.rings.values()):
            self.every(t.delta_ms / 1000.0, self._on_delta)
            self.every(t.trim_interval_ms / 1000.0, self._on_trim)
        self.flush()

    def stop(self) -> None:
        self.stopped = True

    def every(self, interval: float, fn: Callable[[], None]) -> None:
        def tick():
            if self.stopped:
                return
            fn()
            self.flush()
            self.runtime.call_later(interval, tick)
        self.runtime.call_later(interval, tick)

    def _on_retry(self) -> None:
        for r in self.rings.values():
            r.on_retry_timer()
        if self.replica is not None:
            self.replica.on_timer()

    def _on_delta(self) -> None:
        for r in self.rings.values():
            r.on_delta_timer()

    def _on_trim(self) -> None:
        for r in self.rings.values():
            r.on_trim_timer()

    # --- messaging -------------------------------------------------------------------

    def trace(self, kind: str, *data) -> None:
        self.runtime.trace(kind, self.pid, *data)

    def send(self, dst: int, env: Envelope) -> None:
        self.outbox.append((False, dst, env))

    def send_to(self, dst: int, msg_type: MsgType, group: int, payload: bytes) -> None:
        env = Envelope(msg_type, group, self.pid, payload)
        if dst == self.pid:
            self.local(env)
        else:
            self.send(dst, env)

    def local(self, env: Envelope) -> None:
        self.local_queue.append(env)

    def flush(self) -> None:
        """Run local work to completion, make logs durable, then release messages."""
        while True:
            while self.local_queue:
                self.handle(self.pid, self.local_queue.popleft())
            for r in self.rings.values():
                r.pump()
            if not self.local_queue:
                break
        for slog in self.logs:
            slog.sync()
        out, self.outbox = self.outbox, []
        for to_client, dst, env in out:
            if to_client:
                self.runtime.reply(dst, env)
            else:
                self.runtime.send(dst, env)

    def deliver(self, src: int, env: Envelope) -> None:
        if self.stopped:
            return
        self.handle(src, env)
        self.flush()

    def handle(self, src: int, env: Envelope) -> None:
        t = env.msg_type
        rep = self.replica
        if t == MsgType.CLIENT_REQUEST:
            self.on_client_request(src, ClientRequest.decode(env.payload))
        elif t == MsgType.TRIM_QUERY:
            if rep is not None:
                rep.on_trim_query(src, env)
        elif t == MsgType.CKPT_QUERY:
            if rep is not None:
                rep.on_ckpt_query(src, env)
        elif t == MsgType.CKPT_REPLY:
            if rep is not None:
                rep.on_ckpt_reply(src, env)
        elif t == MsgType.CKPT_FETCH:
            if rep is not None:
                rep.on_ckpt_fetch(src, env)
        elif t == MsgType.CKPT_CHUNK:
            if rep is not None:
                rep.on_ckpt_chunk(src, env)
        else:
            ring = self.rings.get(env.group)
            if ring is not None:
                ring.handle(src, env)

    # --- hooks used by rings -------------------------------------------------------------

    def on_ring_decision(self, group: int, d: Decision) -> None:
        if self.replica is not None:
            self.replica.on_decision(group, d)

    def on_trimmed(self, group: int, r: Retransmit) -> None:
        if self.replica is not None:
            self.replica.on_trimmed(group, r)

    # --- multicast API ------------------------------------------------------------------------

    def next_seq(self) -> int:
        self._seq += 1
        return (self.incarnation << SEQ_BITS) | self._seq

    def multicast(self, group: int, payload: bytes) -> tuple[int, int]:
        """Propose ``payload`` to ``group``; returns the message id."""
        return self._propose(group, bytes([RAW]) + payload)

    def _propose(self, group: int, body: bytes) -> tuple[int, int]:
        ring = self.rings.get(group)
        if ring is None or ring.proposer is None:
            raise ValueError(f"process {self.pid} cannot propose to group {group}")
        msg = Message(self.pid, self.next_seq(), body)
        ring.proposer.propose(msg)
        self.trace("multicast", group, msg.mid)
        return msg.mid

    def on_client_request(self, client: int, req: ClientRequest) -> None:
        if not req.command:
            return
        try:
            self._propose(req.target, wrap_client(client, req.seq, req.command))
        except ValueError as exc:
            log.warning("rejecting client %d request %d: %s", client, req.seq, exc)
