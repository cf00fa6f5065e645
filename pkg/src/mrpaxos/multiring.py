"""Deterministic merge across rings and rate leveling with skip instances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

from mrpaxos.messages import ProposedValue

BLOCKED = None


@dataclass(frozen=True)
class Skipped:
    """One virtual instance consumed out of a skip value."""
    group: int
    instance: int


@dataclass(frozen=True)
class Delivery:
    group: int
    instance: int
    value: ProposedValue


class DecidedQueue:
    """Per-ring stream of decided values, released in instance order.

    A ``Skip(n)`` decided at instance ``i`` covers virtual instances
    ``i .. i+n-1``; each is released as a separate :class:`Skipped` item.
    """

    def __init__(self, group: int, next_instance: int = 0):
        self.group = group
        self.next = next_instance
        self.skip_end = next_instance
        self.decided: dict[int, ProposedValue] = {}

    def reset(self, next_instance: int) -> None:
        """Reposition after installing a checkpoint; keeps decisions still needed."""
        self.next = next_instance
        self.skip_end = next_instance
        for inst in sorted(self.decided):
            v = self.decided[inst]
            if inst < next_instance:
                if v.is_skip and inst + v.count > next_instance:
                    self.skip_end = max(self.skip_end, inst + v.count)
                del self.decided[inst]

    def add(self, instance: int, value: ProposedValue) -> bool:
        """Store a decision; returns False for duplicates and stale instances."""
        if instance < self.next:
            if value.is_skip and instance + value.count > self.next:
                if instance + value.count > self.skip_end:
                    self.skip_end = instance + value.count
                    return True
            return False
        if instance in self.decided:
            return False
        self.decided[instance] = value
        return True

    def peek(self):
        if self.next < self.skip_end:
            return Skipped(self.group, self.next)
        v = self.decided.get(self.next)
        if v is None:
            return BLOCKED
        if v.is_skip:
            return Skipped(self.group, self.next)
        return Delivery(self.group, self.next, v)

    def consume(self) -> None:
        v = self.decided.pop(self.next, None)
        if v is not None and v.is_skip:
            self.skip_end = max(self.skip_end, self.next + v.count)
        self.next += 1

    @property
    def has_gap(self) -> bool:
        """A later instance is known while the next one is missing."""
        return self.peek() is BLOCKED and bool(self.decided)

    @property
    def highest_known(self) -> int:
        return max(self.decided, default=self.next - 1)


@dataclass
class MergeCursor:
    """Round-robin position over the subscribed groups, ``m`` instances per turn."""
    groups: list[int]
    m: int = 1
    index: int = 0
    consumed_in_turn: int = 0
    next_instance: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.groups = sorted(self.groups)
        for g in self.groups:
            self.next_instance.setdefault(g, 0)

    @property
    def current(self) -> int:
        return self.groups[self.index]

    def advance(self) -> None:
        self.next_instance[self.current] += 1
        self.consumed_in_turn += 1
        if self.consumed_in_turn == self.m:
            self.consumed_in_turn = 0
            self.index = (self.index + 1) % len(self.groups)

    def checkpoint_id(self) -> tuple[tuple[int, int], ...]:
        return tuple((g, self.next_instance[g] - 1) for g in self.groups)

    def snapshot(self) -> tuple:
        return (tuple(self.groups), self.m, self.index, self.consumed_in_turn,
                tuple(self.next_instance[g] for g in self.groups))

    @classmethod
    def restore(cls, snap: tuple) -> "MergeCursor":
        groups, m, index, in_turn, nexts = snap
        return cls(list(groups), m, index, in_turn, dict(zip(groups, nexts)))

    @classmethod
    def from_id(cls, k: Iterable[tuple[int, int]], m: int) -> "MergeCursor":
        """Rebuild the round-robin position implied by a checkpoint tuple."""
        k = sorted(k)
        groups = [g for g, _ in k]
        counts = [inst + 1 for _, inst in k]
        cur = cls(groups, m)
        total = sum(counts)
        for _ in range(total):
            cur.advance()
        if [cur.next_instance[g] for g in groups] != counts:
            raise ValueError(f"tuple {k} is not a round-robin position for m={m}")
        return cur


def merge_next(cursor: MergeCursor, queues: dict[int, DecidedQueue]):
    """Consume and return the next merged item, or ``BLOCKED``.

    Skip instances count against the turn quota like application instances.
    """
    q = queues[cursor.current]
    if q.next != cursor.next_instance[cursor.current]:
        raise RuntimeError(f"queue {q.group} out of step with merge cursor")
    item = q.peek()
    if item is BLOCKED:
        return BLOCKED
    q.consume()
    cursor.advance()
    return item


def merge_all(cursor: MergeCursor, queues: dict[int, DecidedQueue]) -> list:
    out = []
    while True:
        item = merge_next(cursor, queues)
        if item is BLOCKED:
            return out
        out.append(item)


@dataclass
class SkipPolicy:
    """Per-interval accounting at a coordinator for rate leveling."""
    delta_ms: float
    max_rate: float
    proposed_in_interval: int = 0

    @property
    def budget(self) -> int:
        return math.ceil(round(self.max_rate * self.delta_ms / 1000.0, 9))

    def record(self, instances: int = 1) -> None:
        self.proposed_in_interval += instances


def rate_level_tick(policy: SkipPolicy) -> ProposedValue | None:
    """Called once per interval: top the ring up to its expected rate, then reset."""
    deficit = max(0, policy.budget - policy.proposed_in_interval)
    policy.proposed_in_interval = 0
    if deficit > 0:
        return ProposedValue.skip(deficit)
    return None
