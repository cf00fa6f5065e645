"""Replicated services and the factory that builds one per replica."""

from __future__ import annotations

from mrpaxos.core import ClusterConfig
from mrpaxos.services.base import DummyService, RecordingService, Service
from mrpaxos.storage import Disk


def make_service(cfg: ClusterConfig, pid: int, disk: Disk) -> Service:
    kind = cfg.service.kind
    groups = cfg.process(pid).subscriptions
    if not groups:
        return Service()
    if kind == "record":
        return RecordingService()
    if kind == "dummy":
        return DummyService()
    if kind == "kv":
        from mrpaxos.services.kv import KvStore, PartitionMap
        pmap = PartitionMap.from_config(cfg)
        own = sorted(g for g in groups if g in pmap.groups)
        if len(own) != 1:
            raise ValueError(f"kv replica {pid} must subscribe to exactly one partition group")
        return KvStore(pmap, own[0])
    from mrpaxos.services.dlog import Dlog, LogDirectory
    return Dlog(LogDirectory.from_config(cfg), groups, disk,
                cfg.service.cache_limit, cfg.service.segment_sync)


__all__ = ["DummyService", "RecordingService", "Service", "make_service"]
