"""Offline verification of simulator traces.

Each check returns violations with a minimal counterexample (the events that
disagree), so a failing seed can be replayed and inspected.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from mrpaxos.core import ClusterConfig
from mrpaxos.recovery import satisfies_merge_order


@dataclass(frozen=True)
class Violation:
    prop: str
    detail: str
    counterexample: tuple = ()


@dataclass
class CheckReport:
    violations: list[Violation] = field(default_factory=list)
    stats: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def by_property(self) -> dict[str, list[Violation]]:
        out: dict[str, list[Violation]] = defaultdict(list)
        for v in self.violations:
            out[v.prop].append(v)
        return dict(out)

    def __str__(self) -> str:
        if self.ok:
            return "ok " + " ".join(f"{k}={v}" for k, v in sorted(self.stats.items()))
        return "\n".join(f"{v.prop}: {v.detail} {v.counterexample}" for v in self.violations[:20])


PROPERTIES = ("agreement", "validity", "integrity", "merge_order", "acyclic",
              "checkpoint", "trim", "recovery")


def check_agreement(trace) -> list[Violation]:
    """All processes that learn instance i of group g learn the same value."""
    seen: dict[tuple[int, int], tuple] = {}
    out = []
    for e in trace:
        if e[1] in ("learn", "decide"):
            _, kind, pid, g, inst, vid = e[:6]
            first = seen.setdefault((g, inst), e)
            if first[5] != vid:
                out.append(Violation("agreement", f"group {g} instance {inst}", (first, e)))
    return out


def _deliveries(trace):
    """Yield ``(pid, incarnation, event)`` for every deliver event."""
    inc: dict[int, int] = defaultdict(int)
    for e in trace:
        if e[1] == "start":
            inc[e[2]] = e[3]
        elif e[1] == "deliver":
            yield e[2], inc[e[2]], e


def check_validity(trace) -> list[Violation]:
    sent = {}
    for e in trace:
        if e[1] in ("multicast", "propose"):
            sent[tuple(e[4])] = e[3]
    out = []
    for pid, _, e in _deliveries(trace):
        mid, g = tuple(e[6]), e[3]
        if mid not in sent:
            out.append(Violation("validity", f"{pid} delivered unknown message {mid}", (e,)))
        elif sent[mid] != g:
            out.append(Violation("validity", f"{mid} multicast to {sent[mid]} delivered in {g}", (e,)))
    return out


def check_integrity(trace) -> list[Violation]:
    """No incarnation delivers a message twice."""
    seen: dict[tuple[int, int], dict] = defaultdict(dict)
    out = []
    for pid, inc, e in _deliveries(trace):
        mid = tuple(e[6])
        prev = seen[(pid, inc)].get(mid)
        if prev is not None:
            out.append(Violation("integrity", f"{pid} delivered {mid} twice", (prev, e)))
        seen[(pid, inc)][mid] = e
    return out


def partition_sequences(trace, cfg: ClusterConfig):
    """Map partition index -> {position: (mid, event)} merged over all replicas and
    incarnations, plus violations where two replicas disagree at a position."""
    part_of = {}
    parts = cfg.partitions()
    for i, p in enumerate(parts):
        for pid in p.replicas:
            part_of[pid] = i
    seqs: dict[int, dict[int, tuple]] = defaultdict(dict)
    out = []
    for pid, _, e in _deliveries(trace):
        count, mid = e[5], tuple(e[6])
        slot = seqs[part_of[pid]]
        prev = slot.get(count)
        if prev is None:
            slot[count] = (mid, e)
        elif prev[0] != mid:
            out.append(Violation("merge_order",
                                 f"partition {sorted(parts[part_of[pid]].replicas)} "
                                 f"position {count}: {prev[0]} vs {mid}", (prev[1], e)))
    return seqs, out


def check_acyclic(seqs) -> list[Violation]:
    """The union of every partition's delivery order has no cycle."""
    succ: dict[tuple, set] = defaultdict(set)
    nodes = set()
    for slot in seqs.values():
        order = [slot[k][0] for k in sorted(slot)]
        nodes.update(order)
        for a, b in zip(order, order[1:]):
            if a != b:
                succ[a].add(b)
    # iterative DFS with colours
    WHITE, GREY, BLACK = 0, 1, 2
    colour = dict.fromkeys(nodes, WHITE)
    parent: dict = {}
    for root in sorted(nodes):
        if colour[root] != WHITE:
            continue
        stack = [(root, iter(sorted(succ[root])))]
        colour[root] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = BLACK
                stack.pop()
                continue
            if colour.get(nxt, WHITE) == GREY:
                cycle = [nxt]
                for n, _ in reversed(stack):
                    cycle.append(n)
                    if n == nxt:
                        break
                return [Violation("acyclic", "delivery orders form a cycle",
                                  tuple(reversed(cycle)))]
            if colour.get(nxt, WHITE) == WHITE:
                colour[nxt] = GREY
                parent[nxt] = node
                stack.append((nxt, iter(sorted(succ[nxt]))))
    return []


def check_checkpoints(trace, cfg: ClusterConfig) -> list[Violation]:
    """Tuples respect merge order, and equal tuples in a partition mean equal state."""
    out = []
    part_of = {}
    for i, p in enumerate(cfg.partitions()):
        for pid in p.replicas:
            part_of[pid] = i
    states: dict[tuple, tuple] = {}
    for e in trace:
        if e[1] == "checkpoint":
            pid, k, count, digest = e[2], tuple(map(tuple, e[3])), e[4], e[5]
            if not satisfies_merge_order(k):
                out.append(Violation("checkpoint", f"{pid} tuple {k} breaks merge order", (e,)))
            prev = states.setdefault((part_of[pid], k), (count, digest, e))
            if prev[:2] != (count, digest):
                out.append(Violation("checkpoint", f"divergent state at {k}", (prev[2], e)))
    return out


def check_trims(trace, cfg: ClusterConfig) -> list[Violation]:
    """Every trim point is covered by durable checkpoints of a majority of each partition."""
    out = []
    best: dict[int, dict[int, int]] = defaultdict(dict)   # pid -> group -> highest k
    for e in trace:
        if e[1] == "checkpoint":
            for g, k in e[3]:
                if k > best[e[2]].get(g, -1):
                    best[e[2]][g] = k
        elif e[1] == "recover":
            for g, k in e[3]:
                if k > best[e[2]].get(g, -1):
                    best[e[2]][g] = k
        elif e[1] == "trim":
            _, _, coord, g, point, quorum = e[:6]
            quorum = dict(quorum)
            if quorum and point != min(quorum.values()):
                out.append(Violation("trim", f"group {g} trim {point} is not the quorum minimum", (e,)))
            for part in cfg.partitions_of_group(g):
                covered = [p for p in part.replicas if best[p].get(g, -1) >= point]
                if len(covered) < part.majority:
                    out.append(Violation(
                        "trim", f"group {g} trimmed to {point} but only {covered} of "
                                f"{sorted(part.replicas)} hold a covering checkpoint", (e,)))
    return out


def check_recoveries(trace, cfg: ClusterConfig) -> list[Violation]:
    """A recovered replica's state equals a checkpointed state at the same position."""
    out = []
    part_of = {}
    for i, p in enumerate(cfg.partitions()):
        for pid in p.replicas:
            part_of[pid] = i
    states: dict[tuple, tuple] = {}
    for e in trace:
        if e[1] == "checkpoint":
            states.setdefault((part_of[e[2]], tuple(map(tuple, e[3]))), (e[4], e[5]))
    for e in trace:
        if e[1] == "recover":
            pid, k, count, digest = e[2], tuple(map(tuple, e[3])), e[5], e[6]
            if all(x == -1 for _, x in k):
                continue
            ref = states.get((part_of[pid], k))
            if ref is None:
                out.append(Violation("recovery", f"{pid} recovered to unknown checkpoint {k}", (e,)))
            elif ref != (count, digest):
                out.append(Violation("recovery", f"{pid} state at {k} differs", (e, ref)))
        elif e[1] == "violation":
            out.append(Violation("recovery", str(e[3]), (e,)))
    return out


def check_trace(trace: Iterable[tuple], cfg: ClusterConfig) -> CheckReport:
    trace = list(trace)
    rep = CheckReport()
    rep.violations += check_agreement(trace)
    rep.violations += check_validity(trace)
    rep.violations += check_integrity(trace)
    seqs, merge = partition_sequences(trace, cfg)
    rep.violations += merge
    rep.violations += check_acyclic(seqs)
    rep.violations += check_checkpoints(trace, cfg)
    rep.violations += check_trims(trace, cfg)
    rep.violations += check_recoveries(trace, cfg)
    counts: dict[str, int] = defaultdict(int)
    for e in trace:
        counts[e[1]] += 1
    rep.stats = {k: counts[k] for k in ("deliver", "learn", "checkpoint", "trim", "recover",
                                        "crash", "restart")}
    return rep
