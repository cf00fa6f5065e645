"""Replicated shared logs with atomic multi-log appends.

Command layout::

    APPEND  u8 1 | u32 log | value
    MAPPEND u8 2 | u16 n | n * u32 log | value
    READ    u8 3 | u32 log | u64 position
    TRIM    u8 4 | u32 log | u64 position

Replies: APPEND -> ``u64 position``; MAPPEND -> ``u16 n | n * (u32 log, u64 position)``
for the logs held by the answering replica; READ -> the value; TRIM -> empty.

Each log is stored in segment files ``dlog-<log>-<base>.seg``: a 12 byte header
``u32 log | u64 base position`` followed by ``u32 length | bytes`` entries.
Recent entries are also kept in a byte-bounded in-memory cache.
"""

from __future__ import annotations

import hashlib
import struct
from array import array
from collections import OrderedDict
from dataclasses import dataclass, field

from mrpaxos.core import ClusterConfig, GroupId
from mrpaxos.services.base import BAD_REQUEST, NOT_FOUND, OK, TRIMMED, Service
from mrpaxos.storage import Disk

APPEND, MAPPEND, READ, TRIM = 1, 2, 3, 4
_SEG_HDR = struct.Struct(">IQ")


@dataclass(frozen=True)
class DlogCommand:
    op: int
    logs: tuple[int, ...]
    value: bytes = b""
    position: int = 0

    def encode(self) -> bytes:
        if self.op == APPEND:
            return struct.pack(">BI", APPEND, self.logs[0]) + self.value
        if self.op == MAPPEND:
            return struct.pack(f">BH{len(self.logs)}I", MAPPEND, len(self.logs), *self.logs) \
                + self.value
        return struct.pack(">BIQ", self.op, self.logs[0], self.position)

    @classmethod
    def decode(cls, data: bytes) -> "DlogCommand":
        op = data[0]
        if op == APPEND:
            (log,) = struct.unpack_from(">I", data, 1)
            return cls(APPEND, (log,), bytes(data[5:]))
        if op == MAPPEND:
            (n,) = struct.unpack_from(">H", data, 1)
            if n == 0:
                raise ValueError("multi-append needs at least one log")
            logs = struct.unpack_from(f">{n}I", data, 3)
            return cls(MAPPEND, tuple(logs), bytes(data[3 + 4 * n:]))
        if op in (READ, TRIM):
            log, pos = struct.unpack_from(">IQ", data, 1)
            if len(data) != 13:
                raise ValueError("bad read/trim length")
            return cls(op, (log,), b"", pos)
        raise ValueError(f"unknown dlog op {op}")


def append(log: int, value: bytes) -> DlogCommand:
    return DlogCommand(APPEND, (log,), value)


def multi_append(logs, value: bytes) -> DlogCommand:
    logs = tuple(sorted(set(logs)))
    if not logs:
        raise ValueError("multi-append needs at least one log")
    return DlogCommand(MAPPEND, logs, value)


def read(log: int, position: int) -> DlogCommand:
    return DlogCommand(READ, (log,), position=position)


def trim(log: int, position: int) -> DlogCommand:
    return DlogCommand(TRIM, (log,), position=position)


def decode_positions(body: bytes) -> dict[int, int]:
    (n,) = struct.unpack_from(">H", body)
    out = {}
    for i in range(n):
        log, pos = struct.unpack_from(">IQ", body, 2 + 12 * i)
        out[log] = pos
    return out


@dataclass(frozen=True)
class LogDirectory:
    """Which group orders each log; shared by clients and replicas."""
    owners: dict[int, GroupId]
    global_group: GroupId | None = None

    @classmethod
    def from_config(cls, cfg: ClusterConfig) -> "LogDirectory":
        return cls(dict(cfg.service.log_groups), cfg.service.global_group)

    def route(self, cmd: DlogCommand) -> GroupId:
        for log in cmd.logs:
            if log not in self.owners:
                raise KeyError(f"unknown log {log}")
        groups = {self.owners[log] for log in cmd.logs}
        if cmd.op != MAPPEND or len(cmd.logs) == 1:
            return self.owners[cmd.logs[0]]
        if len(groups) == 1:
            return groups.pop()
        if self.global_group is None:
            raise ValueError("multi-append across groups needs a global group")
        return self.global_group

    def groups_of(self, cmd: DlogCommand) -> set[GroupId]:
        return {self.owners[log] for log in cmd.logs}


@dataclass
class _Segment:
    name: str
    base: int
    offsets: array = field(default_factory=lambda: array("Q"))


class LogState:
    def __init__(self, log_id: int, disk: Disk, sync: bool):
        self.log_id = log_id
        self.disk = disk
        self.sync = sync
        self.next_position = 0
        self.trim_position = 0
        self.segments: list[_Segment] = []

    def _segment_name(self, base: int) -> str:
        return f"dlog-{self.log_id}-{base:020d}.seg"

    def new_segment(self) -> _Segment:
        seg = _Segment(self._segment_name(self.next_position), self.next_position)
        self.disk.replace(seg.name, _SEG_HDR.pack(self.log_id, seg.base))
        self.segments.append(seg)
        return seg

    def write(self, value: bytes) -> int:
        if not self.segments:
            self.new_segment()
        seg = self.segments[-1]
        off = self.disk.append(seg.name, struct.pack(">I", len(value)) + value)
        seg.offsets.append(off)
        if self.sync:
            self.disk.sync(seg.name)
        pos = self.next_position
        self.next_position += 1
        return pos

    def read_disk(self, pos: int) -> bytes:
        for seg in reversed(self.segments):
            if seg.base <= pos:
                off = seg.offsets[pos - seg.base]
                (n,) = struct.unpack(">I", self.disk.read_at(seg.name, off, 4))
                return self.disk.read_at(seg.name, off + 4, n)
        raise KeyError(pos)

    def trim(self, pos: int) -> None:
        self.trim_position = max(self.trim_position, pos)
        keep = []
        for i, seg in enumerate(self.segments):
            end = self.segments[i + 1].base if i + 1 < len(self.segments) else self.next_position
            if end <= self.trim_position:
                self.disk.delete(seg.name)
            else:
                keep.append(seg)
        self.segments = keep
        self.new_segment()

    def drop_files(self) -> None:
        # includes segments left behind by an earlier incarnation
        for name in self.disk.list(f"dlog-{self.log_id}-"):
            self.disk.delete(name)
        self.segments = []


class Dlog(Service):
    def __init__(self, directory: LogDirectory, groups, disk: Disk,
                 cache_limit: int = 200 * 2**20, segment_sync: bool = False):
        self.directory = directory
        self.disk = disk
        self.cache_limit = cache_limit
        self.segment_sync = segment_sync
        self.held = sorted(l for l, g in directory.owners.items() if g in set(groups))
        self.logs = {l: LogState(l, disk, segment_sync) for l in self.held}
        self.cache: OrderedDict[tuple[int, int], bytes] = OrderedDict()
        self.cache_bytes = 0
        self.disk_reads = 0

    # --- cache ----------------------------------------------------------------

    def _cache_put(self, key, value: bytes) -> None:
        self.cache[key] = value
        self.cache_bytes += len(value)
        while self.cache_bytes > self.cache_limit and self.cache:
            _, old = self.cache.popitem(last=False)
            self.cache_bytes -= len(old)

    def _cache_drop_below(self, log: int, pos: int) -> None:
        for key in [k for k in self.cache if k[0] == log and k[1] < pos]:
            self.cache_bytes -= len(self.cache.pop(key))

    # --- commands -------------------------------------------------------------------

    def execute(self, group, client, cseq, command):
        try:
            cmd = DlogCommand.decode(command)
        except (ValueError, struct.error, IndexError):
            return BAD_REQUEST, b""
        return self.apply(cmd)

    def deliver_raw(self, group, mid, payload):
        try:
            self.apply(DlogCommand.decode(payload))
        except (ValueError, struct.error, IndexError):
            pass

    def apply(self, cmd: DlogCommand) -> tuple[int, bytes]:
        if cmd.op == MAPPEND:
            if any(l not in self.directory.owners for l in cmd.logs):
                return BAD_REQUEST, b""
            mine = [l for l in cmd.logs if l in self.logs]
            out = [struct.pack(">H", len(mine))]
            for l in mine:
                out.append(struct.pack(">IQ", l, self._append(l, cmd.value)))
            return OK, b"".join(out)
        state = self.logs.get(cmd.logs[0])
        if state is None:
            return BAD_REQUEST, b""
        if cmd.op == APPEND:
            return OK, struct.pack(">Q", self._append(state.log_id, cmd.value))
        if cmd.op == READ:
            return self._read(state, cmd.position)
        if cmd.position > state.next_position:
            return BAD_REQUEST, b""
        state.trim(cmd.position)
        self._cache_drop_below(state.log_id, state.trim_position)
        return OK, b""

    def _append(self, log: int, value: bytes) -> int:
        pos = self.logs[log].write(value)
        self._cache_put((log, pos), value)
        return pos

    def _read(self, state: LogState, pos: int) -> tuple[int, bytes]:
        if pos < state.trim_position:
            return TRIMMED, b""
        if pos >= state.next_position:
            return NOT_FOUND, b""
        v = self.cache.get((state.log_id, pos))
        if v is not None:
            return OK, v
        self.disk_reads += 1
        return OK, state.read_disk(pos)

    # --- state transfer ---------------------------------------------------------------

    def snapshot(self) -> bytes:
        parts = [struct.pack(">I", len(self.logs))]
        for l in self.held:
            st = self.logs[l]
            parts.append(struct.pack(">IQQ", l, st.next_position, st.trim_position))
            for pos in range(st.trim_position, st.next_position):
                v = self._read(st, pos)[1]
                parts.append(struct.pack(">I", len(v)) + v)
        return b"".join(parts)

    def restore(self, data):
        for st in self.logs.values():
            st.drop_files()
        self.logs = {l: LogState(l, self.disk, self.segment_sync) for l in self.held}
        self.cache.clear()
        self.cache_bytes = 0
        if not data:
            return
        (n,) = struct.unpack_from(">I", data)
        pos = 4
        for _ in range(n):
            l, nxt, trim_at = struct.unpack_from(">IQQ", data, pos)
            pos += 20
            st = self.logs[l]
            st.next_position = trim_at
            st.trim_position = trim_at
            for _ in range(nxt - trim_at):
                (ln,) = struct.unpack_from(">I", data, pos)
                self._append(l, bytes(data[pos + 4:pos + 4 + ln]))
                pos += 4 + ln

    def digest(self) -> str:
        return hashlib.sha256(self.snapshot()).hexdigest()
