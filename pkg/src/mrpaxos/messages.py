"""Payload layouts carried inside transport envelopes.

Every layout is big-endian.  ``instance`` values are unsigned 64-bit; checkpoint
tuple entries and trim points are signed 64-bit because ``-1`` means "nothing
consumed yet".
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable

from mrpaxos.transport.codec import CodecError

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, s: struct.Struct):
        if self.pos + s.size > len(self.data):
            raise CodecError("truncated payload")
        (v,) = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return v

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CodecError("truncated payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def rest(self) -> bytes:
        out = self.data[self.pos:]
        self.pos = len(self.data)
        return bytes(out)

    def u8(self): return self.take(_U8)
    def u16(self): return self.take(_U16)
    def u32(self): return self.take(_U32)
    def u64(self): return self.take(_U64)
    def i64(self): return self.take(_I64)


# --- consensus values --------------------------------------------------------

@dataclass(frozen=True, order=True)
class Ballot:
    round: int
    proposer: int

    def pack(self) -> int:
        return (self.round << 16) | self.proposer

    @classmethod
    def unpack(cls, raw: int) -> "Ballot":
        return cls(raw >> 16, raw & 0xFFFF)


BALLOT_ZERO = Ballot(0, 0)


@dataclass(frozen=True)
class Message:
    """One multicast message; ``(origin, seq)`` identifies it cluster-wide."""
    origin: int
    seq: int
    payload: bytes

    @property
    def mid(self) -> tuple[int, int]:
        return (self.origin, self.seq)

    @property
    def wire_size(self) -> int:
        return 14 + len(self.payload)


def encode_batch(messages: Iterable[Message]) -> bytes:
    msgs = list(messages)
    parts = [_U32.pack(len(msgs))]
    for m in msgs:
        parts.append(struct.pack(">HQI", m.origin, m.seq, len(m.payload)))
        parts.append(m.payload)
    return b"".join(parts)


def decode_batch(data: bytes) -> tuple[Message, ...]:
    r = _Reader(data)
    n = r.u32()
    out = []
    for _ in range(n):
        origin, seq, ln = r.u16(), r.u64(), r.u32()
        out.append(Message(origin, seq, r.raw(ln)))
    return tuple(out)


APP = 0
SKIP = 1


@dataclass(frozen=True)
class ProposedValue:
    """Either an application batch or a skip of ``count`` instances."""
    kind: int
    messages: tuple[Message, ...] = ()
    count: int = 1

    def __post_init__(self):
        if self.kind == SKIP and self.count < 1:
            raise ValueError("skip count must be >= 1")

    @classmethod
    def app(cls, messages: Iterable[Message]) -> "ProposedValue":
        return cls(APP, tuple(messages))

    @classmethod
    def skip(cls, count: int) -> "ProposedValue":
        return cls(SKIP, (), count)

    @property
    def is_skip(self) -> bool:
        return self.kind == SKIP

    @property
    def span(self) -> int:
        """Instances covered: a skip's own instance is the first of its count."""
        return self.count if self.kind == SKIP else 1

    def encode(self) -> bytes:
        if self.kind == SKIP:
            return _U8.pack(SKIP) + _U32.pack(self.count)
        return _U8.pack(APP) + encode_batch(self.messages)

    @classmethod
    def decode(cls, data: bytes) -> "ProposedValue":
        r = _Reader(data)
        kind = r.u8()
        if kind == SKIP:
            return cls.skip(r.u32())
        if kind == APP:
            return cls.app(decode_batch(r.rest()))
        raise CodecError(f"unknown value kind {kind}")

    @property
    def size(self) -> int:
        """Bytes counted against the batch limit (application payloads only)."""
        return sum(len(m.payload) for m in self.messages)

    def value_id(self) -> bytes:
        return value_digest(self.encode())


def value_digest(encoded: bytes) -> bytes:
    return hashlib.blake2b(encoded, digest_size=8).digest()


# --- ring protocol ------------------------------------------------------------

_P2 = struct.Struct(">QQ8sH")


@dataclass(frozen=True)
class Phase2Message:
    """Combined 2A/2B message; ``votes`` accumulates as it circulates."""
    instance: int
    ballot: Ballot
    value: ProposedValue
    votes: int = 0
    value_id: bytes = b""

    def __post_init__(self):
        if not self.value_id:
            object.__setattr__(self, "value_id", self.value.value_id())

    def with_vote(self) -> "Phase2Message":
        return Phase2Message(self.instance, self.ballot, self.value, self.votes + 1,
                             self.value_id)

    def encode(self) -> bytes:
        return _P2.pack(self.instance, self.ballot.pack(), self.value_id, self.votes) \
            + self.value.encode()

    @classmethod
    def decode(cls, data: bytes) -> "Phase2Message":
        if len(data) < _P2.size:
            raise CodecError("truncated phase 2 message")
        inst, ballot, vid, votes = _P2.unpack_from(data)
        value = ProposedValue.decode(data[_P2.size:])
        return cls(inst, Ballot.unpack(ballot), value, votes, vid)


FLAG_RETRANSMIT = 0x01
_DEC = struct.Struct(">BQQ")


@dataclass(frozen=True)
class Decision:
    instance: int
    ballot: Ballot
    value: ProposedValue
    retransmit: bool = False

    def encode(self) -> bytes:
        flags = FLAG_RETRANSMIT if self.retransmit else 0
        return _DEC.pack(flags, self.instance, self.ballot.pack()) + self.value.encode()

    @classmethod
    def decode(cls, data: bytes) -> "Decision":
        if len(data) < _DEC.size:
            raise CodecError("truncated decision")
        flags, inst, ballot = _DEC.unpack_from(data)
        return cls(inst, Ballot.unpack(ballot), ProposedValue.decode(data[_DEC.size:]),
                   bool(flags & FLAG_RETRANSMIT))


@dataclass(frozen=True)
class Phase1Message:
    """Phase 1A while circulating, Phase 1B once returned to the coordinator.

    ``accepted`` holds ``(instance, ballot, value)`` votes at or above ``start``;
    ``floor`` is the highest trim point among the acceptors that promised.
    """
    ballot: Ballot
    start: int
    end: int
    promises: int = 0
    accepted: tuple[tuple[int, Ballot, ProposedValue], ...] = ()
    floor: int = -1

    def encode(self) -> bytes:
        parts = [struct.pack(">QQQHqI", self.ballot.pack(), self.start, self.end,
                             self.promises, self.floor, len(self.accepted))]
        for inst, b, v in self.accepted:
            enc = v.encode()
            parts.append(struct.pack(">QQI", inst, b.pack(), len(enc)))
            parts.append(enc)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "Phase1Message":
        r = _Reader(data)
        ballot, start, end, promises = r.u64(), r.u64(), r.u64(), r.u16()
        floor, n = r.i64(), r.u32()
        acc = []
        for _ in range(n):
            inst, b, ln = r.u64(), r.u64(), r.u32()
            acc.append((inst, Ballot.unpack(b), ProposedValue.decode(r.raw(ln))))
        return cls(Ballot.unpack(ballot), start, end, promises, tuple(acc), floor)


def encode_propose(m: Message) -> bytes:
    return encode_batch([m])


def decode_propose(data: bytes) -> Message:
    (m,) = decode_batch(data)
    return m


# --- retransmission -------------------------------------------------------------

RT_REQUEST = 0
RT_TRIMMED = 1
RT_END = 2
_RT = struct.Struct(">Bqq")


@dataclass(frozen=True)
class Retransmit:
    """Request ``[start, end]`` (inclusive) or answer with TRIMMED / END.

    For END, ``start`` is the first instance the acceptor could not serve.
    """
    kind: int
    start: int
    end: int

    def encode(self) -> bytes:
        return _RT.pack(self.kind, self.start, self.end)

    @classmethod
    def decode(cls, data: bytes) -> "Retransmit":
        if len(data) != _RT.size:
            raise CodecError("bad retransmit payload")
        return cls(*_RT.unpack(data))


# --- trimming and checkpoints ----------------------------------------------------------

def encode_trim_query(round_no: int) -> bytes:
    return _U32.pack(round_no)


def decode_trim_query(data: bytes) -> int:
    return _Reader(data).u32()


def encode_trim_reply(round_no: int, k: int) -> bytes:
    return _U32.pack(round_no) + _I64.pack(k)


def decode_trim_reply(data: bytes) -> tuple[int, int]:
    r = _Reader(data)
    return r.u32(), r.i64()


def encode_trim(k: int) -> bytes:
    return _I64.pack(k)


def decode_trim(data: bytes) -> int:
    return _Reader(data).i64()


def encode_tuple(pairs: Iterable[tuple[int, int]]) -> bytes:
    pairs = list(pairs)
    return _U16.pack(len(pairs)) + b"".join(struct.pack(">Hq", g, k) for g, k in pairs)


def decode_tuple(r: _Reader) -> tuple[tuple[int, int], ...]:
    n = r.u16()
    return tuple((r.u16(), r.i64()) for _ in range(n))


def encode_ckpt_query(nonce: int) -> bytes:
    return _U32.pack(nonce)


def decode_ckpt_query(data: bytes) -> int:
    return _Reader(data).u32()


def encode_ckpt_reply(nonce: int, pairs) -> bytes:
    return _U32.pack(nonce) + encode_tuple(pairs)


def decode_ckpt_reply(data: bytes):
    r = _Reader(data)
    return r.u32(), decode_tuple(r)


def encode_ckpt_fetch(nonce: int, pairs) -> bytes:
    return _U32.pack(nonce) + encode_tuple(pairs)


def decode_ckpt_fetch(data: bytes):
    r = _Reader(data)
    return r.u32(), decode_tuple(r)


_CHUNK = struct.Struct(">III")


def encode_ckpt_chunk(nonce: int, index: int, total: int, chunk: bytes) -> bytes:
    return _CHUNK.pack(nonce, index, total) + chunk


def decode_ckpt_chunk(data: bytes) -> tuple[int, int, int, bytes]:
    if len(data) < _CHUNK.size:
        raise CodecError("truncated checkpoint chunk")
    nonce, index, total = _CHUNK.unpack_from(data)
    return nonce, index, total, bytes(data[_CHUNK.size:])


# --- clients --------------------------------------------------------------------

_CREQ = struct.Struct(">QH")
_CREP = struct.Struct(">QHB")


@dataclass(frozen=True)
class ClientRequest:
    """``target`` is the group the command must be multicast to.

    An empty ``command`` registers the client's stream for replies.
    """
    seq: int
    target: int
    command: bytes = b""

    def encode(self) -> bytes:
        return _CREQ.pack(self.seq, self.target) + self.command

    @classmethod
    def decode(cls, data: bytes) -> "ClientRequest":
        if len(data) < _CREQ.size:
            raise CodecError("truncated client request")
        seq, target = _CREQ.unpack_from(data)
        return cls(seq, target, bytes(data[_CREQ.size:]))


@dataclass(frozen=True)
class ClientReply:
    seq: int
    partition: int
    status: int
    body: bytes = b""

    def encode(self) -> bytes:
        return _CREP.pack(self.seq, self.partition, self.status) + self.body

    @classmethod
    def decode(cls, data: bytes) -> "ClientReply":
        if len(data) < _CREP.size:
            raise CodecError("truncated client reply")
        seq, part, status = _CREP.unpack_from(data)
        return cls(seq, part, status, bytes(data[_CREP.size:]))

