"""Exhaustive sequential-consistency oracle for small key-value histories.

Searches for a total order of all operations that keeps each client's program
order and under which every recorded reply is what a single sequential store
would have returned.  Operations without a reply (the client gave up) may be
placed anywhere after their predecessors or left out entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

from mrpaxos.services import kv
from mrpaxos.services.base import EXISTS, NOT_FOUND, OK


@dataclass(frozen=True)
class HistOp:
    client: int
    cmd: kv.KvCommand
    status: int | None          # None: no reply received
    value: object = None        # bytes for reads, list of (k, v) for scans


@dataclass
class SCResult:
    ok: bool
    witness: list[HistOp] | None
    inconclusive: bool = False
    explored: int = 0


def _apply(state: dict, cmd: kv.KvCommand):
    """Return ``(status, value, new_state)`` for a sequential store."""
    if cmd.op == kv.READ:
        v = state.get(cmd.key)
        return (NOT_FOUND, b"", state) if v is None else (OK, v, state)
    if cmd.op == kv.SCAN:
        items = sorted((k, v) for k, v in state.items() if cmd.key <= k <= cmd.upper)
        return OK, items, state
    present = cmd.key in state
    if cmd.op == kv.UPDATE:
        if not present:
            return NOT_FOUND, None, state
        return OK, None, {**state, cmd.key: cmd.value}
    if cmd.op == kv.INSERT:
        if present:
            return EXISTS, None, state
        return OK, None, {**state, cmd.key: cmd.value}
    if not present:
        return NOT_FOUND, None, state
    new = dict(state)
    del new[cmd.key]
    return OK, None, new


def _matches(op: HistOp, status, value) -> bool:
    if op.status is None:
        return True
    if op.status != status:
        return False
    if op.cmd.op == kv.READ and status == OK:
        return op.value == value
    if op.cmd.op == kv.SCAN:
        return list(op.value) == list(value)
    return True


def check_sequential_consistency(history: list[HistOp], initial: dict | None = None,
                                 budget: int = 2_000_000) -> SCResult:
    programs: dict[int, list[HistOp]] = {}
    for op in history:
        programs.setdefault(op.client, []).append(op)
    clients = sorted(programs)
    seen: set = set()
    explored = 0
    order: list[HistOp] = []

    def freeze(state):
        return tuple(sorted(state.items()))

    def dfs(pos: tuple[int, ...], state: dict) -> bool:
        nonlocal explored
        explored += 1
        if explored > budget:
            raise TimeoutError
        if all(pos[i] == len(programs[c]) for i, c in enumerate(clients)):
            return True
        key = (pos, freeze(state))
        if key in seen:
            return False
        seen.add(key)
        for i, c in enumerate(clients):
            if pos[i] == len(programs[c]):
                continue
            op = programs[c][pos[i]]
            nxt = pos[:i] + (pos[i] + 1,) + pos[i + 1:]
            status, value, new = _apply(state, op.cmd)
            if _matches(op, status, value):
                order.append(op)
                if dfs(nxt, new):
                    return True
                order.pop()
            if op.status is None and dfs(nxt, state):
                return True
        return False

    try:
        ok = dfs(tuple(0 for _ in clients), dict(initial or {}))
    except TimeoutError:
        return SCResult(False, None, inconclusive=True, explored=explored)
    return SCResult(ok, list(order) if ok else None, explored=explored)
