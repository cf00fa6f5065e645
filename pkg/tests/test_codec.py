import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrpaxos.transport.codec import (
    CodecError,
    Envelope,
    FrameReader,
    MsgType,
    OversizeError,
    decode,
    encode,
)


def test_decision_layout():
    frame = encode(Envelope(MsgType.DECISION, 0, 0))
    assert frame == bytes.fromhex("00000005" "04" "0000" "0000")


def test_field_order_big_endian():
    frame = encode(Envelope(MsgType.PHASE2, 0x0102, 0x0304, b"xy"))
    assert frame == b"\x00\x00\x00\x07\x03\x01\x02\x03\x04xy"


envelopes = st.builds(
    Envelope,
    st.sampled_from(list(MsgType)),
    st.integers(0, 0xFFFF),
    st.integers(0, 0xFFFF),
    st.binary(max_size=512),
)


@given(envelopes)
def test_roundtrip(env):
    assert decode(encode(env)) == env


@given(st.lists(envelopes, max_size=8), st.integers(1, 17))
def test_stream_reassembly(envs, cut):
    data = b"".join(encode(e) for e in envs)
    reader = FrameReader()
    got = []
    for i in range(0, len(data), cut):
        got += reader.feed(data[i:i + cut])
    assert got == envs
    assert reader.pending == 0


def test_oversize_boundary():
    encode(Envelope(MsgType.PHASE2, 0, 0, b"x" * 32768))
    with pytest.raises(OversizeError):
        encode(Envelope(MsgType.PHASE2, 0, 0, b"x" * 32769))
    with pytest.raises(OversizeError):
        encode(Envelope(MsgType.PHASE2, 0, 0, b"x" * 101), max_payload=100)


def test_length_mismatch_rejected():
    frame = encode(Envelope(MsgType.TRIM, 1, 2, b"abc"))
    with pytest.raises(CodecError):
        decode(frame + b"!")
    with pytest.raises(CodecError):
        decode(frame[:-1])
    with pytest.raises(CodecError):
        decode(b"\x00\x00")


def test_unknown_type_rejected():
    with pytest.raises(CodecError, match="unknown"):
        decode(b"\x00\x00\x00\x05\x7f\x00\x00\x00\x00")


def test_ids_must_fit():
    with pytest.raises(CodecError):
        encode(Envelope(MsgType.TRIM, 1 << 16, 0))


def test_reader_limits_frame_size():
    with pytest.raises(CodecError):
        FrameReader(max_frame=10).feed(b"\x00\x00\x01\x00")
