from mrpaxos.transport.codec import (
    CodecError,
    Envelope,
    FrameReader,
    MsgType,
    OversizeError,
    decode,
    encode,
)

__all__ = [
    "CodecError",
    "Envelope",
    "FrameReader",
    "MsgType",
    "OversizeError",
    "decode",
    "encode",
]
