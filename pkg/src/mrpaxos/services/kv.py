"""Partitioned key-value store.

Command layout (inside a client request)::

    u8 op | u16 key length | key | op-specific tail
    UPDATE, INSERT: u32 value length | value
    SCAN:           u16 upper key length | upper key     (bounds inclusive)

Reply bodies: READ returns the value; SCAN returns ``u32 n`` followed by ``n``
entries ``u16 klen | key | u32 vlen | value`` in key order; other ops return
nothing.  Status codes are those of :mod:`mrpaxos.services.base`.
"""

from __future__ import annotations

import bisect
import hashlib
import struct
from dataclasses import dataclass

from sortedcontainers import SortedDict

from mrpaxos.core import ClusterConfig, GroupId
from mrpaxos.services.base import BAD_REQUEST, EXISTS, NOT_FOUND, OK, WRONG_PARTITION, Service

READ, SCAN, UPDATE, INSERT, DELETE = 1, 2, 3, 4, 5
OP_NAMES = {READ: "read", SCAN: "scan", UPDATE: "update", INSERT: "insert", DELETE: "delete"}

_MASK = (1 << 64) - 1


def mix64(key: bytes) -> int:
    """FNV-1a over the key bytes followed by the splitmix64 finaliser."""
    h = 0xCBF29CE484222325
    for b in key:
        h = ((h ^ b) * 0x100000001B3) & _MASK
    h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK
    return h ^ (h >> 31)


@dataclass(frozen=True)
class KvCommand:
    op: int
    key: bytes
    value: bytes = b""
    upper: bytes = b""

    def encode(self) -> bytes:
        out = struct.pack(">BH", self.op, len(self.key)) + self.key
        if self.op in (UPDATE, INSERT):
            out += struct.pack(">I", len(self.value)) + self.value
        elif self.op == SCAN:
            out += struct.pack(">H", len(self.upper)) + self.upper
        return out

    @classmethod
    def decode(cls, data: bytes) -> "KvCommand":
        op, klen = struct.unpack_from(">BH", data)
        if op not in OP_NAMES:
            raise ValueError(f"unknown kv op {op}")
        pos = 3
        key = bytes(data[pos:pos + klen])
        pos += klen
        value = upper = b""
        if op in (UPDATE, INSERT):
            (vlen,) = struct.unpack_from(">I", data, pos)
            value = bytes(data[pos + 4:pos + 4 + vlen])
            pos += 4 + vlen
        elif op == SCAN:
            (ulen,) = struct.unpack_from(">H", data, pos)
            upper = bytes(data[pos + 2:pos + 2 + ulen])
            pos += 2 + ulen
        if pos != len(data):
            raise ValueError("trailing bytes in kv command")
        return cls(op, key, value, upper)


def read(key: bytes) -> KvCommand:
    return KvCommand(READ, key)


def scan(lo: bytes, hi: bytes) -> KvCommand:
    return KvCommand(SCAN, lo, upper=hi)


def update(key: bytes, value: bytes) -> KvCommand:
    return KvCommand(UPDATE, key, value)


def insert(key: bytes, value: bytes) -> KvCommand:
    return KvCommand(INSERT, key, value)


def delete(key: bytes) -> KvCommand:
    return KvCommand(DELETE, key)


def encode_entries(items) -> bytes:
    items = list(items)
    parts = [struct.pack(">I", len(items))]
    for k, v in items:
        parts.append(struct.pack(">H", len(k)) + k + struct.pack(">I", len(v)) + v)
    return b"".join(parts)


def decode_entries(data: bytes) -> list[tuple[bytes, bytes]]:
    (n,) = struct.unpack_from(">I", data)
    pos, out = 4, []
    for _ in range(n):
        (klen,) = struct.unpack_from(">H", data, pos)
        k = bytes(data[pos + 2:pos + 2 + klen])
        pos += 2 + klen
        (vlen,) = struct.unpack_from(">I", data, pos)
        out.append((k, bytes(data[pos + 4:pos + 4 + vlen])))
        pos += 4 + vlen
    return out


@dataclass(frozen=True)
class PartitionMap:
    """Total map from keys to partition groups, shared by clients and replicas."""
    mode: str
    groups: tuple[GroupId, ...]
    splits: tuple[bytes, ...] = ()
    global_group: GroupId | None = None

    def __post_init__(self):
        if not self.groups:
            raise ValueError("partition map needs at least one group")
        if self.mode == "range" and len(self.splits) != len(self.groups) - 1:
            raise ValueError("range map needs one split fewer than groups")
        if self.mode not in ("hash", "range"):
            raise ValueError(f"unknown mode {self.mode}")

    @classmethod
    def from_config(cls, cfg: ClusterConfig) -> "PartitionMap":
        svc = cfg.service
        groups = svc.partition_groups or tuple(g for g in cfg.groups if g != svc.global_group)
        return cls(svc.partition_mode, tuple(groups),
                   tuple(s.encode() for s in svc.range_splits), svc.global_group)

    def owner(self, key: bytes) -> GroupId:
        if self.mode == "hash":
            return self.groups[mix64(key) % len(self.groups)]
        # keys below splits[0] go to groups[0], keys at or above splits[i-1] to groups[i]
        return self.groups[bisect.bisect_right(self.splits, key)]

    def scan_groups(self, lo: bytes, hi: bytes) -> tuple[GroupId, ...]:
        """Partitions that may hold a key in ``[lo, hi]``."""
        if self.mode == "hash" or lo > hi:
            return self.groups
        a = bisect.bisect_right(self.splits, lo)
        b = bisect.bisect_right(self.splits, hi)
        return self.groups[a:b + 1]

    def route(self, cmd: KvCommand) -> GroupId:
        if cmd.op != SCAN:
            return self.owner(cmd.key)
        involved = self.scan_groups(cmd.key, cmd.upper)
        if len(involved) == 1 and self.mode == "range":
            return involved[0]
        if self.global_group is None:
            if len(self.groups) == 1:
                return self.groups[0]
            raise ValueError("multi-partition scan needs a global group")
        return self.global_group


class KvStore(Service):
    """One partition's replica state: an ordered map of the keys it owns."""

    def __init__(self, pmap: PartitionMap, partition: GroupId):
        self.pmap = pmap
        self.partition = partition
        self.data: SortedDict = SortedDict()

    def execute(self, group, client, cseq, command):
        try:
            cmd = KvCommand.decode(command)
        except (ValueError, struct.error):
            return BAD_REQUEST, b""
        return self.apply(cmd)

    def apply(self, cmd: KvCommand) -> tuple[int, bytes]:
        if cmd.op == SCAN:
            if cmd.key > cmd.upper:
                return OK, encode_entries([])
            keys = self.data.irange(cmd.key, cmd.upper)
            return OK, encode_entries((k, self.data[k]) for k in keys)
        if self.pmap.owner(cmd.key) != self.partition:
            return WRONG_PARTITION, b""
        if cmd.op == READ:
            v = self.data.get(cmd.key)
            return (NOT_FOUND, b"") if v is None else (OK, v)
        if cmd.op == UPDATE:
            if cmd.key not in self.data:
                return NOT_FOUND, b""
            self.data[cmd.key] = cmd.value
            return OK, b""
        if cmd.op == INSERT:
            if cmd.key in self.data:
                return EXISTS, b""
            self.data[cmd.key] = cmd.value
            return OK, b""
        if cmd.key not in self.data:
            return NOT_FOUND, b""
        del self.data[cmd.key]
        return OK, b""

    def deliver_raw(self, group, mid, payload):
        # raw multicasts carry no client; apply them for their side effect only
        try:
            self.apply(KvCommand.decode(payload))
        except (ValueError, struct.error):
            pass

    def snapshot(self) -> bytes:
        return encode_entries(self.data.items())

    def restore(self, data):
        self.data = SortedDict(decode_entries(data)) if data else SortedDict()

    def digest(self) -> str:
        return hashlib.sha256(self.snapshot()).hexdigest()
