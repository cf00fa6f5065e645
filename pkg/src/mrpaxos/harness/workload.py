"""Request generators shared by the real and simulated load drivers."""

from __future__ import annotations

import random
from dataclasses import dataclass

from mrpaxos.core import ClusterConfig, reply_partition
from mrpaxos.services import dlog as dl
from mrpaxos.services import kv
from mrpaxos.services.client import dlog_plan, kv_plan

MODES = ("dummy", "kv", "dlog")


@dataclass(frozen=True)
class Request:
    target: int
    command: bytes
    needed: frozenset[int]
    ring: int


def reply_partitions(cfg: ClusterConfig, group: int) -> frozenset[int]:
    return frozenset(reply_partition(cfg, p) for p in cfg.learners_of(group))


class Workload:
    """Produces the next request for a client pinned to one ring.

    ``dummy`` sends opaque payloads of ``size`` bytes; ``kv`` mixes reads and
    updates over ``keys`` keys of its ring's partition; ``dlog`` appends to the
    logs owned by the ring.
    """

    def __init__(self, cfg: ClusterConfig, mode: str, size: int, seed: int = 0,
                 keys: int = 1000):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.cfg, self.mode, self.size = cfg, mode, size
        self.rng = random.Random(seed)
        g = cfg.service.global_group
        self.rings = [x for x in cfg.groups if x != g] or list(cfg.groups)
        self._needed = {x: reply_partitions(cfg, x) for x in cfg.groups}
        if mode == "kv":
            self.pmap = kv.PartitionMap.from_config(cfg)
            self.keys: dict[int, list[bytes]] = {}
            for i in range(keys):
                k = b"k%08d" % i
                self.keys.setdefault(self.pmap.owner(k), []).append(k)
        elif mode == "dlog":
            self.directory = dl.LogDirectory.from_config(cfg)
            self.logs: dict[int, list[int]] = {}
            for log_id, grp in cfg.service.log_groups:
                self.logs.setdefault(grp, []).append(log_id)

    def next(self, client_index: int) -> Request:
        ring = self.rings[client_index % len(self.rings)]
        body = self.rng.randbytes(self.size)
        if self.mode == "dummy":
            return Request(ring, body, self._needed[ring], ring)
        if self.mode == "kv":
            key = self.rng.choice(self.keys[ring])
            cmd = kv.read(key) if self.rng.random() < 0.5 else kv.update(key, body)
            target, needed = kv_plan(self.pmap, cmd)
        else:
            cmd = dl.append(self.rng.choice(self.logs[ring]), body)
            target, needed = dlog_plan(self.directory, cmd)
        return Request(target, cmd.encode(), needed, ring)

    def preload(self) -> list[Request]:
        """Commands that must run before a kv benchmark: insert every key."""
        if self.mode != "kv":
            return []
        out = []
        for keys in self.keys.values():
            for k in keys:
                cmd = kv.insert(k, b"")
                target, needed = kv_plan(self.pmap, cmd)
                out.append(Request(target, cmd.encode(), needed, target))
        return out
