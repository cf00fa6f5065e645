"""Client side of the services, independent of the transport.

A request is complete once a reply arrived from every partition it needs:
one partition for single-key commands, every involved partition for scans
and cross-group multi-appends.  The first reply per partition wins.
Timeouts resend the same ``(client, seq)`` so replicas can deduplicate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any, Callable

from mrpaxos.messages import ClientReply, ClientRequest
from mrpaxos.services import dlog as dl
from mrpaxos.services import kv
from mrpaxos.services.base import OK


@dataclass
class Pending:
    seq: int
    target: int
    command: bytes
    needed: frozenset[int]
    on_done: Callable[["Pending"], None] | None = None
    replies: dict[int, ClientReply] = field(default_factory=dict)
    sent_at: float = 0.0
    attempts: int = 0
    meta: Any = None

    @property
    def done(self) -> bool:
        return self.needed <= set(self.replies)

    @property
    def request(self) -> ClientRequest:
        return ClientRequest(self.seq, self.target, self.command)


class ClientCore:
    def __init__(self, client_id: int, timeout: float = 0.5):
        self.client_id = client_id
        self.timeout = timeout
        self.seq = 0
        self.pending: dict[int, Pending] = {}

    def submit(self, target: int, command: bytes, needed, now: float,
               on_done=None, meta=None) -> Pending:
        self.seq += 1
        p = Pending(self.seq, target, command, frozenset(needed), on_done, sent_at=now,
                    attempts=1, meta=meta)
        self.pending[p.seq] = p
        return p

    def on_reply(self, rep: ClientReply) -> Pending | None:
        p = self.pending.get(rep.seq)
        if p is None or rep.partition not in p.needed:
            return None
        p.replies.setdefault(rep.partition, rep)
        if not p.done:
            return None
        del self.pending[rep.seq]
        if p.on_done is not None:
            p.on_done(p)
        return p

    def due(self, now: float) -> list[Pending]:
        out = []
        for p in self.pending.values():
            if now - p.sent_at >= self.timeout:
                p.sent_at = now
                p.attempts += 1
                out.append(p)
        return out


# --- key-value helpers -----------------------------------------------------------

def kv_plan(pmap: kv.PartitionMap, cmd: kv.KvCommand) -> tuple[int, frozenset[int]]:
    target = pmap.route(cmd)
    if cmd.op == kv.SCAN:
        return target, frozenset(pmap.scan_groups(cmd.key, cmd.upper))
    return target, frozenset([pmap.owner(cmd.key)])


def kv_result(cmd: kv.KvCommand, p: Pending):
    """``(status, value)``: value is bytes for reads, sorted entries for scans."""
    if cmd.op == kv.SCAN:
        merged: dict[bytes, bytes] = {}
        status = OK
        for rep in p.replies.values():
            if rep.status != OK:
                status = rep.status
                continue
            for k, v in kv.decode_entries(rep.body):
                merged.setdefault(k, v)
        return status, sorted(merged.items())
    rep = next(iter(p.replies.values()))
    return rep.status, rep.body if cmd.op == kv.READ else None


# --- dlog helpers -------------------------------------------------------------------

def dlog_plan(directory: dl.LogDirectory, cmd: dl.DlogCommand) -> tuple[int, frozenset[int]]:
    target = directory.route(cmd)
    return target, frozenset(directory.groups_of(cmd))


def dlog_result(cmd: dl.DlogCommand, p: Pending):
    reps = list(p.replies.values())
    bad = [r.status for r in reps if r.status != OK]
    if bad:
        return bad[0], None
    if cmd.op == dl.APPEND:
        return OK, struct.unpack(">Q", reps[0].body)[0]
    if cmd.op == dl.MAPPEND:
        out: dict[int, int] = {}
        for r in reps:
            out.update(dl.decode_positions(r.body))
        return OK, out
    if cmd.op == dl.READ:
        return OK, reps[0].body
    return OK, None
