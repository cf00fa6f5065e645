"""Replicated service interface plus two trivial services used in tests and benchmarks."""

from __future__ import annotations

import hashlib
import json
import struct

OK = 0
NOT_FOUND = 1
EXISTS = 2
BAD_REQUEST = 3
TRIMMED = 4
WRONG_PARTITION = 5


class Service:
    """Deterministic state machine driven by the merged delivery sequence.

    ``execute`` handles client commands and returns ``(status, body)``;
    ``deliver_raw`` handles multicast payloads that did not come from a client.
    """

    def execute(self, group: int, client: int, cseq: int, command: bytes) -> tuple[int, bytes]:
        return OK, b""

    def deliver_raw(self, group: int, mid: tuple[int, int], payload: bytes) -> None:
        pass

    def snapshot(self) -> bytes:
        raise NotImplementedError

    def restore(self, data: bytes | None) -> None:
        raise NotImplementedError

    def digest(self) -> str:
        return hashlib.sha256(self.snapshot()).hexdigest()


class RecordingService(Service):
    """State is the ordered list of delivered message ids (and client commands)."""

    def __init__(self):
        self.log: list[tuple] = []

    def execute(self, group, client, cseq, command):
        self.log.append(("c", group, client, cseq))
        return OK, b""

    def deliver_raw(self, group, mid, payload):
        self.log.append(("m", group, mid[0], mid[1]))

    def snapshot(self) -> bytes:
        return json.dumps(self.log, separators=(",", ":")).encode()

    def restore(self, data):
        self.log = [tuple(x) for x in json.loads(data)] if data else []


class DummyService(Service):
    """Counts commands and folds them into a hash chain; replies with the count."""

    def __init__(self):
        self.count = 0
        self.chain = b"\x00" * 32

    def _fold(self, data: bytes) -> None:
        self.count += 1
        self.chain = hashlib.sha256(self.chain + data).digest()

    def execute(self, group, client, cseq, command):
        self._fold(command)
        return OK, struct.pack(">Q", self.count)

    def deliver_raw(self, group, mid, payload):
        self._fold(payload)

    def snapshot(self) -> bytes:
        return struct.pack(">Q", self.count) + self.chain

    def restore(self, data):
        if data:
            (self.count,) = struct.unpack_from(">Q", data)
            self.chain = bytes(data[8:40])
        else:
            self.count, self.chain = 0, b"\x00" * 32
