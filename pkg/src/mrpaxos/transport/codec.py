"""Length-prefixed binary frames.

Frame layout (all integers big-endian)::

    length   u32   byte count of the body
    type     u8    MsgType
    group    u16
    origin   u16
    payload  ...   type specific, see the payload helpers in ``mrpaxos.wire``
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

DEFAULT_MAX_PAYLOAD = 32768

_LEN = struct.Struct(">I")
_HEAD = struct.Struct(">BHH")
HEADER_SIZE = _HEAD.size


class MsgType(enum.IntEnum):
    PROPOSE = 0x00
    PHASE1A = 0x01
    PHASE1B = 0x02
    PHASE2 = 0x03
    DECISION = 0x04
    TRIM_QUERY = 0x05
    TRIM_REPLY = 0x06
    TRIM = 0x07
    CKPT_QUERY = 0x08
    CKPT_REPLY = 0x09
    CKPT_FETCH = 0x0A
    CKPT_CHUNK = 0x0B
    RETRANSMIT = 0x0C
    CLIENT_REQUEST = 0x0D
    CLIENT_REPLY = 0x0E


class CodecError(ValueError):
    pass


class OversizeError(CodecError):
    pass


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    group: int
    origin: int
    payload: bytes = b""


def encode(e: Envelope, max_payload: int | None = DEFAULT_MAX_PAYLOAD) -> bytes:
    if max_payload is not None and len(e.payload) > max_payload:
        raise OversizeError(f"payload of {len(e.payload)} bytes exceeds {max_payload}")
    if not (0 <= e.group < 1 << 16 and 0 <= e.origin < 1 << 16):
        raise CodecError("group and origin must fit in 16 bits")
    body = _HEAD.pack(int(e.msg_type), e.group, e.origin) + e.payload
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes) -> Envelope:
    if len(body) < HEADER_SIZE:
        raise CodecError(f"body of {len(body)} bytes is shorter than the header")
    t, group, origin = _HEAD.unpack_from(body)
    try:
        msg_type = MsgType(t)
    except ValueError:
        raise CodecError(f"unknown message type {t:#x}") from None
    return Envelope(msg_type, group, origin, bytes(body[HEADER_SIZE:]))


def decode(frame: bytes) -> Envelope:
    """Decode one complete frame; the declared length must match exactly."""
    if len(frame) < _LEN.size:
        raise CodecError("truncated length prefix")
    (length,) = _LEN.unpack_from(frame)
    if length != len(frame) - _LEN.size:
        raise CodecError(f"declared length {length} but body has {len(frame) - _LEN.size} bytes")
    return decode_body(frame[_LEN.size:])


class FrameReader:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self, max_frame: int = 1 << 26):
        self._buf = bytearray()
        self.max_frame = max_frame

    def feed(self, data: bytes) -> list[Envelope]:
        self._buf += data
        out = []
        while len(self._buf) >= _LEN.size:
            (length,) = _LEN.unpack_from(self._buf)
            if length > self.max_frame:
                raise CodecError(f"frame of {length} bytes exceeds limit")
            end = _LEN.size + length
            if len(self._buf) < end:
                break
            out.append(decode_body(bytes(self._buf[_LEN.size:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
