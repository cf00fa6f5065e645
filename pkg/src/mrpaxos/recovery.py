"""Acceptor logging, checkpoints, log trimming and replica recovery rules.

Checkpoints are identified by a tuple with one entry per subscribed group, in
ascending group order; entry ``k[x]`` is the highest instance of group ``x``
whose effects the checkpoint contains (``-1`` for none).  Because learners
merge their groups round-robin in ascending order, earlier groups are never
behind later ones, which makes the tuples of one partition totally ordered.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from mrpaxos.messages import Ballot, ProposedValue
from mrpaxos.storage import Disk

log = logging.getLogger(__name__)

CheckpointId = tuple[tuple[int, int], ...]   # ((group, instance), ...) ascending group


class ProtocolViolation(RuntimeError):
    """A safety invariant was observed broken (e.g. incomparable checkpoint tuples)."""


class TrimmedError(LookupError):
    """Requested instances were already removed from the acceptor log."""


# --- stable log --------------------------------------------------------------------

PROMISE, VOTE, DECIDE, TRIM = 1, 2, 3, 4
_REC = struct.Struct(">IBQQ")        # length, tag, instance, ballot
_REC_BODY = _REC.size - 4


@dataclass
class LogRecord:
    tag: int
    instance: int
    ballot: int
    value: bytes = b""

    def encode(self) -> bytes:
        return _REC.pack(_REC_BODY + len(self.value), self.tag, self.instance,
                         self.ballot) + self.value


def decode_records(data: bytes) -> tuple[list[LogRecord], int]:
    """Decode back-to-back records; returns the records and the valid byte length.

    A torn final record (short length prefix or short body) is discarded.
    """
    out, pos = [], 0
    while pos + 4 <= len(data):
        (length,) = struct.unpack_from(">I", data, pos)
        end = pos + 4 + length
        if length < _REC_BODY or end > len(data):
            break
        _, tag, inst, ballot = _REC.unpack_from(data, pos)
        out.append(LogRecord(tag, inst, ballot, bytes(data[pos + _REC.size:end])))
        pos = end
    return out, pos


@dataclass
class AcceptorLogState:
    promised: Ballot | None = None
    window_end: int = 0
    votes: dict[int, tuple[Ballot, ProposedValue]] = field(default_factory=dict)
    decided: set[int] = field(default_factory=set)
    trim_point: int = -1


class StableLog:
    """Append-only acceptor log.

    In ``sync`` mode the owner calls :meth:`sync` before releasing any message
    that depends on a logged record; ``async`` mode skips the fsync.
    """

    def __init__(self, disk: Disk, name: str = "acceptor.log", mode: str = "sync"):
        self.disk = disk
        self.name = name
        self.mode = mode
        self.dirty = False
        self.trim_point = -1

    def _append(self, rec: LogRecord) -> None:
        self.disk.append(self.name, rec.encode())
        self.dirty = True

    def promise(self, start: int, end: int, ballot: Ballot) -> None:
        self._append(LogRecord(PROMISE, start, ballot.pack(), struct.pack(">Q", end)))

    def vote(self, instance: int, ballot: Ballot, value: ProposedValue) -> None:
        self._append(LogRecord(VOTE, instance, ballot.pack(), value.encode()))

    def decide(self, instance: int, ballot: Ballot, value: ProposedValue | None = None) -> None:
        """Mark ``instance`` decided; ``value`` only when it differs from our vote."""
        self._append(LogRecord(DECIDE, instance, ballot.pack(),
                               value.encode() if value is not None else b""))

    def sync(self) -> None:
        if self.dirty:
            if self.mode == "sync":
                self.disk.sync(self.name)
            self.dirty = False

    def load(self) -> AcceptorLogState:
        data = self.disk.read(self.name) or b""
        records, valid = decode_records(data)
        if valid != len(data):
            log.warning("%s: discarding %d torn bytes at tail", self.name, len(data) - valid)
            self.disk.replace(self.name, data[:valid])
        st = AcceptorLogState()
        for rec in records:
            b = Ballot.unpack(rec.ballot)
            if rec.tag == PROMISE:
                if st.promised is None or b >= st.promised:
                    st.promised = b
                st.window_end = max(st.window_end, struct.unpack(">Q", rec.value)[0])
            elif rec.tag == VOTE:
                if rec.instance > st.trim_point:
                    st.votes[rec.instance] = (b, ProposedValue.decode(rec.value))
            elif rec.tag == DECIDE:
                if rec.instance > st.trim_point:
                    if rec.value:
                        st.votes[rec.instance] = (b, ProposedValue.decode(rec.value))
                    if rec.instance in st.votes:
                        st.decided.add(rec.instance)
            elif rec.tag == TRIM:
                st.trim_point = max(st.trim_point, rec.instance)
                _drop_trimmed(st.votes, st.decided, st.trim_point)
        self.trim_point = st.trim_point
        return st

    def compact(self, state: AcceptorLogState) -> None:
        """Rewrite the log keeping only records above the trim point."""
        out = [LogRecord(TRIM, max(state.trim_point, 0), 0).encode()] \
            if state.trim_point >= 0 else []
        if state.promised is not None:
            out.append(LogRecord(PROMISE, 0, state.promised.pack(),
                                 struct.pack(">Q", state.window_end)).encode())
        for inst in sorted(state.votes):
            b, v = state.votes[inst]
            out.append(LogRecord(VOTE, inst, b.pack(), v.encode()).encode())
            if inst in state.decided:
                out.append(LogRecord(DECIDE, inst, b.pack()).encode())
        self.disk.replace(self.name, b"".join(out))
        self.trim_point = state.trim_point
        self.dirty = False


def _drop_trimmed(votes: dict, decided: set, trim_point: int) -> None:
    # a record survives while any instance it covers lies above the trim point
    for inst in [i for i, (_, v) in votes.items() if i + v.span - 1 <= trim_point]:
        del votes[inst]
        decided.discard(inst)


# --- checkpoint identifiers ---------------------------------------------------------

def satisfies_merge_order(k: CheckpointId) -> bool:
    """Earlier groups are never behind later ones: x < y implies k[x] >= k[y]."""
    vals = [inst for _, inst in k]
    return all(a >= b for a, b in zip(vals, vals[1:]))


def compare_ids(a: CheckpointId, b: CheckpointId) -> int | None:
    """Componentwise comparison; ``None`` when the tuples are incomparable."""
    if [g for g, _ in a] != [g for g, _ in b]:
        raise ProtocolViolation(f"checkpoint tuples over different groups: {a} vs {b}")
    le = all(x <= y for (_, x), (_, y) in zip(a, b))
    ge = all(x >= y for (_, x), (_, y) in zip(a, b))
    if le and ge:
        return 0
    if le:
        return -1
    if ge:
        return 1
    return None


def max_id(ids: Iterable[CheckpointId]) -> CheckpointId:
    """The maximal tuple, checking every pair along the way is comparable."""
    best = None
    for k in ids:
        if best is None:
            best = k
            continue
        c = compare_ids(k, best)
        if c is None:
            raise ProtocolViolation(f"incomparable checkpoint tuples {k} and {best}")
        if c > 0:
            best = k
    if best is None:
        raise ValueError("no checkpoint ids")
    return best


def empty_id(groups: Iterable[int]) -> CheckpointId:
    return tuple((g, -1) for g in sorted(groups))


def compute_trim_point(replies: Mapping[int, int]) -> int:
    """Lowest instance reported by the trim quorum."""
    if not replies:
        raise ValueError("empty trim quorum")
    return min(replies.values())


def trim_quorum_complete(replies: Mapping[int, int], partitions: Sequence[Iterable[int]]) -> bool:
    """True once a majority of every partition subscribing the group has answered."""
    for replicas in partitions:
        replicas = set(replicas)
        if len(replicas & set(replies)) < len(replicas) // 2 + 1:
            return False
    return True


@dataclass(frozen=True)
class TrimDecision:
    group: int
    trim_point: int
    quorum: Mapping[int, int]


def decide_trim(group: int, replies: Mapping[int, int]) -> TrimDecision:
    return TrimDecision(group, compute_trim_point(replies), dict(replies))


def select_recovery_source(responses: Mapping[int, CheckpointId]) -> tuple[CheckpointId, int]:
    """Pick the most recent checkpoint among the recovery quorum.

    Ties prefer the lowest process id so the choice is deterministic.
    """
    best = max_id(responses.values())
    source = min(pid for pid, k in responses.items() if k == best)
    return best, source


# --- checkpoints ---------------------------------------------------------------------

CKPT_MAGIC = b"MRCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    id: CheckpointId
    state: bytes
    digest: bytes = b""

    def __post_init__(self):
        if not self.digest:
            object.__setattr__(self, "digest", hashlib.sha256(self.state).digest())

    def encode(self) -> bytes:
        head = CKPT_MAGIC + struct.pack(">HH", CKPT_VERSION, len(self.id))
        pairs = b"".join(struct.pack(">Hq", g, k) for g, k in self.id)
        return head + pairs + self.digest + self.state

    @classmethod
    def decode(cls, data: bytes) -> "Checkpoint":
        if data[:4] != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, n = struct.unpack_from(">HH", data, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 8
        pairs = []
        for _ in range(n):
            pairs.append(struct.unpack_from(">Hq", data, pos))
            pos += 10
        digest = data[pos:pos + 32]
        state = data[pos + 32:]
        if hashlib.sha256(state).digest() != digest:
            raise ValueError("checkpoint digest mismatch")
        return cls(tuple(pairs), bytes(state), bytes(digest))


class CheckpointStore:
    """Keeps the latest durable checkpoint; a failed write leaves the old one."""

    def __init__(self, disk: Disk, name: str = "checkpoint"):
        self.disk = disk
        self.name = name
        self._latest: Checkpoint | None = None
        self._encoded: bytes | None = None
        data = disk.read(name)
        if data:
            try:
                self._latest = Checkpoint.decode(data)
                self._encoded = data
            except (ValueError, struct.error):
                log.warning("ignoring unreadable checkpoint %s", name)

    def save(self, ckpt: Checkpoint) -> None:
        data = ckpt.encode()
        self.disk.replace(self.name, data)
        self._latest, self._encoded = ckpt, data

    @property
    def latest(self) -> Checkpoint | None:
        return self._latest

    @property
    def encoded(self) -> bytes | None:
        return self._encoded


def take_checkpoint(state: bytes, cursor) -> Checkpoint:
    """Snapshot service state at a command boundary, identified by the cursor position."""
    k = cursor.checkpoint_id()
    if not satisfies_merge_order(k):
        raise ProtocolViolation(f"checkpoint tuple {k} violates merge order")
    return Checkpoint(k, state)


def chunk(data: bytes, size: int) -> list[bytes]:
    return [data[i:i + size] for i in range(0, len(data), size)] or [b""]


# --- exhaustive model check --------------------------------------------------------

@dataclass
class ModelCheckResult:
    replicas: int
    states: int
    checkpoints: int
    trims: int
    recoveries: int
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def _majorities(n: int, need: int | None = None) -> list[frozenset[int]]:
    need = n // 2 + 1 if need is None else need
    return [frozenset(c) for size in range(need, n + 1)
            for c in itertools.combinations(range(n), size)]


def position_to_id(pos: int, n_groups: int, m: int) -> CheckpointId:
    """Tuple reached after consuming ``pos`` instances round-robin, ``m`` per turn."""
    rounds, rem = divmod(pos, n_groups * m)
    counts = []
    for g in range(n_groups):
        extra = min(m, max(0, rem - g * m))
        counts.append(rounds * m + extra)
    return tuple((g, c - 1) for g, c in enumerate(counts))


def model_check_recovery(n_replicas: int, n_groups: int = 2, instances: int = 6,
                         m: int = 1, max_states: int | None = None,
                         quorum: int | None = None) -> ModelCheckResult:
    """Explore every interleaving of deliver/checkpoint/crash/trim/recover.

    State per replica: ``(position, checkpoint position, alive)``; globally the
    per-group trim points.  Trim and recovery events are expanded over every
    majority quorum.  Positions count merged instances, so checkpoint tuples
    come from :func:`position_to_id` exactly as a live learner would produce.
    Checks: merge order on every checkpoint, trim point below every quorum
    member, and every recovery finds its needed instances untrimmed.
    ``quorum`` overrides the majority size (smaller values must fail).
    """
    limit = instances * n_groups
    quorums = _majorities(n_replicas, quorum)
    violations: list[str] = []
    counts = {"checkpoints": 0, "trims": 0, "recoveries": 0}
    ids = [position_to_id(p, n_groups, m) for p in range(limit + 1)]

    # the (group, instance) consumed when moving from position p to p + 1
    step = []
    for p in range(limit):
        g = next(g for g in range(n_groups) if ids[p + 1][g] != ids[p][g])
        step.append((g, ids[p + 1][g][1]))

    start = (tuple((0, 0, True) for _ in range(n_replicas)), tuple(-1 for _ in range(n_groups)))
    seen = {start}
    stack = [start]
    while stack:
        reps, trims = stack.pop()
        succ = []
        for i, (pos, ck, alive) in enumerate(reps):
            if alive:
                # a live learner that fell behind the trim point is stuck until it
                # crashes and recovers through a checkpoint transfer
                if pos < limit and step[pos][1] > trims[step[pos][0]]:
                    succ.append((_set(reps, i, (pos + 1, ck, True)), trims))
                if ck != pos:
                    k = ids[pos]
                    counts["checkpoints"] += 1
                    if not satisfies_merge_order(k):
                        violations.append(f"merge order broken by checkpoint {k}")
                    succ.append((_set(reps, i, (pos, pos, True)), trims))
                succ.append((_set(reps, i, (ck, ck, False)), trims))
            else:
                for q in quorums:
                    if i not in q:
                        continue
                    counts["recoveries"] += 1
                    responses = {j: ids[reps[j][1]] for j in q}
                    k_r, src = select_recovery_source(responses)
                    if not all(kr >= t for (_, kr), t in zip(k_r, trims)):
                        violations.append(
                            f"recovery of {i} via {sorted(q)} picked {k_r} below trim {trims}")
                    succ.append((_set(reps, i, (reps[src][1], reps[src][1], True)), trims))
        for g in range(n_groups):
            for q in quorums:
                replies = {j: ids[reps[j][1]][g][1] for j in q}
                dec = decide_trim(g, replies)
                counts["trims"] += 1
                if any(dec.trim_point > v for v in replies.values()):
                    violations.append(f"trim {dec.trim_point} above a quorum member")
                if dec.trim_point > trims[g]:
                    succ.append((reps, _set(trims, g, dec.trim_point)))
        for s in succ:
            canon = (tuple(sorted(s[0])), s[1])
            if canon not in seen:
                seen.add(canon)
                stack.append(canon)
        if max_states is not None and len(seen) > max_states:
            violations.append("state budget exceeded")
            break
    return ModelCheckResult(n_replicas, len(seen), counts["checkpoints"], counts["trims"],
                            counts["recoveries"], violations)


def _set(t: tuple, i: int, v) -> tuple:
    return t[:i] + (v,) + t[i + 1:]
