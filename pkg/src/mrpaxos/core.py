"""Cluster vocabulary and static configuration.

A cluster is a set of rings (one per multicast group) plus a set of processes.
Each process declares which groups it subscribes to; learners with identical
subscription sets form a *partition* and traverse identical state sequences.

The configuration file is INI-like::

    [ring 0]
    members = 0 1 2 3          # ring successor order
    acceptors = 0 1 2
    coordinator = 0

    [process 3]
    address = 127.0.0.1:7003
    subscriptions = 0
    roles = proposer learner

    [tuning]
    m = 1
    delta_ms = 5
    lambda = 9000

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import enum
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

ProcessId = int
GroupId = int


class ConfigError(ValueError):
    """Raised when a configuration document cannot be parsed or is invalid."""


class Role(enum.Enum):
    PROPOSER = "proposer"
    ACCEPTOR = "acceptor"
    LEARNER = "learner"


@dataclass(frozen=True)
class RingConfig:
    group: GroupId
    members: tuple[ProcessId, ...]
    acceptors: frozenset[ProcessId]
    coordinator: ProcessId

    def __post_init__(self):
        if not self.members:
            raise ConfigError(f"ring {self.group}: no members")
        if len(set(self.members)) != len(self.members):
            raise ConfigError(f"ring {self.group}: members repeat")
        if not self.acceptors:
            raise ConfigError(f"ring {self.group}: needs at least one acceptor")
        if not self.acceptors <= set(self.members):
            raise ConfigError(f"ring {self.group}: acceptors must be ring members")
        if self.coordinator not in self.acceptors:
            raise ConfigError(
                f"ring {self.group}: coordinator {self.coordinator} is not an acceptor")

    @property
    def quorum_size(self) -> int:
        return len(self.acceptors) // 2 + 1

    def position(self, pid: ProcessId) -> int:
        return self.members.index(pid)

    def ordered_acceptors(self) -> list[ProcessId]:
        """Acceptors in ring order starting at the coordinator."""
        start = self.position(self.coordinator)
        n = len(self.members)
        ring = [self.members[(start + i) % n] for i in range(n)]
        return [p for p in ring if p in self.acceptors]


@dataclass(frozen=True)
class ProcessConfig:
    pid: ProcessId
    address: str = ""
    subscriptions: frozenset[GroupId] = frozenset()
    roles: frozenset[Role] = frozenset()
    data_dir: str = ""

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.address.rpartition(":")
        return host or "127.0.0.1", int(port)


@dataclass(frozen=True)
class Tuning:
    merge_window: int = 1            # M
    delta_ms: float = 5.0            # skip interval
    max_rate: float = 9000.0         # lambda, instances per second
    batch_limit: int = 32768
    buffer_slots: int = 15000
    slot_size: int = 32768
    checkpoint_interval: int = 10000
    phase1_window: int = 65536
    log_mode: str = "sync"           # sync | async
    rate_leveling: bool = True
    retry_ms: float = 100.0
    trim_interval_ms: float = 1000.0
    max_inflight: int = 128

    def __post_init__(self):
        if self.merge_window < 1:
            raise ConfigError("M must be >= 1")
        if self.delta_ms <= 0:
            raise ConfigError("delta_ms must be > 0")
        if self.max_rate <= 0:
            raise ConfigError("lambda must be > 0")
        if self.batch_limit < 1 or self.slot_size < 1 or self.buffer_slots < 1:
            raise ConfigError("batch_limit, slot_size and buffer_slots must be positive")
        if self.batch_limit > self.slot_size:
            raise ConfigError("batch_limit cannot exceed slot_size")
        if self.checkpoint_interval < 1 or self.phase1_window < 4 or self.max_inflight < 1:
            raise ConfigError("checkpoint_interval, phase1_window and max_inflight too small")
        if self.log_mode not in ("sync", "async"):
            raise ConfigError(f"log_mode must be sync or async, not {self.log_mode!r}")

    @property
    def skip_budget(self) -> int:
        """Instances a ring is expected to decide per interval: ceil(lambda * delta)."""
        # round before ceil so 9000 * 0.005 does not become 45.000000000000001
        return math.ceil(round(self.max_rate * self.delta_ms / 1000.0, 9))


@dataclass(frozen=True)
class ServiceConfig:
    kind: str = "record"             # record | dummy | kv | dlog
    global_group: GroupId | None = None
    partition_mode: str = "hash"     # hash | range
    partition_groups: tuple[GroupId, ...] = ()
    range_splits: tuple[str, ...] = ()
    log_groups: tuple[tuple[int, GroupId], ...] = ()
    cache_limit: int = 200 * 2**20
    segment_sync: bool = False

    def __post_init__(self):
        if self.kind not in ("record", "dummy", "kv", "dlog"):
            raise ConfigError(f"unknown service kind {self.kind!r}")
        if self.partition_mode not in ("hash", "range"):
            raise ConfigError(f"unknown partition_mode {self.partition_mode!r}")
        if self.partition_mode == "range" and self.partition_groups and \
                len(self.range_splits) != len(self.partition_groups) - 1:
            raise ConfigError("range mode needs exactly one split key fewer than partitions")
        if list(self.range_splits) != sorted(self.range_splits):
            raise ConfigError("range_splits must be ascending")


@dataclass(frozen=True)
class Partition:
    groups: frozenset[GroupId]
    replicas: frozenset[ProcessId]

    @property
    def majority(self) -> int:
        return len(self.replicas) // 2 + 1


@dataclass(frozen=True)
class ClusterConfig:
    rings: tuple[RingConfig, ...]
    processes: tuple[ProcessConfig, ...]
    tuning: Tuning = field(default_factory=Tuning)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def __post_init__(self):
        groups = [r.group for r in self.rings]
        if len(set(groups)) != len(groups):
            raise ConfigError("duplicate ring ids")
        object.__setattr__(self, "rings", tuple(sorted(self.rings, key=lambda r: r.group)))
        pids = [p.pid for p in self.processes]
        if len(set(pids)) != len(pids):
            raise ConfigError("duplicate process ids")
        object.__setattr__(self, "processes", tuple(sorted(self.processes, key=lambda p: p.pid)))
        procs = {p.pid: p for p in self.processes}
        for ring in self.rings:
            for pid in ring.members:
                if pid not in procs:
                    raise ConfigError(f"ring {ring.group}: undeclared process {pid}")
            for pid in ring.acceptors:
                if Role.ACCEPTOR not in procs[pid].roles:
                    raise ConfigError(
                        f"ring {ring.group}: acceptor {pid} lacks the acceptor role")
        ring_ids = set(groups)
        for p in self.processes:
            for g in p.subscriptions:
                if g not in ring_ids:
                    raise ConfigError(f"process {p.pid} subscribes to unknown group {g}")
                if p.pid not in self.ring(g).members:
                    raise ConfigError(
                        f"process {p.pid} subscribes to {g} but is not a member of ring {g}")
            if p.subscriptions and Role.LEARNER not in p.roles:
                raise ConfigError(f"process {p.pid} has subscriptions but no learner role")
        svc = self.service
        for g in svc.partition_groups + tuple(g for _, g in svc.log_groups):
            if g not in ring_ids:
                raise ConfigError(f"service references unknown group {g}")
        if svc.global_group is not None and svc.global_group not in ring_ids:
            raise ConfigError(f"unknown global group {svc.global_group}")

    # lookups

    def ring(self, group: GroupId) -> RingConfig:
        for r in self.rings:
            if r.group == group:
                return r
        raise KeyError(f"unknown group {group}")

    def process(self, pid: ProcessId) -> ProcessConfig:
        for p in self.processes:
            if p.pid == pid:
                return p
        raise KeyError(f"unknown process {pid}")

    @property
    def groups(self) -> list[GroupId]:
        return [r.group for r in self.rings]

    @property
    def subscriptions(self) -> dict[ProcessId, frozenset[GroupId]]:
        return {p.pid: p.subscriptions for p in self.processes if p.subscriptions}

    def learners_of(self, group: GroupId) -> list[ProcessId]:
        return [p.pid for p in self.processes if group in p.subscriptions]

    def proposers_of(self, group: GroupId) -> list[ProcessId]:
        ring = self.ring(group)
        return [pid for pid in ring.members if Role.PROPOSER in self.process(pid).roles]

    def partitions(self) -> list[Partition]:
        by_groups: dict[frozenset[GroupId], set[ProcessId]] = {}
        for pid, subs in self.subscriptions.items():
            by_groups.setdefault(subs, set()).add(pid)
        return sorted((Partition(g, frozenset(r)) for g, r in by_groups.items()),
                      key=lambda part: (sorted(part.groups), sorted(part.replicas)))

    def partitions_of_group(self, group: GroupId) -> list[Partition]:
        return [part for part in self.partitions() if group in part.groups]

    def digest(self) -> bytes:
        """Stable fingerprint exchanged by peers on connect."""
        return hashlib.sha256(dumps_config(self).encode()).digest()


def partition_of(pid: ProcessId, cfg: ClusterConfig) -> Partition:
    """Return the partition (learners with exactly ``pid``'s subscriptions)."""
    try:
        subs = cfg.process(pid).subscriptions
    except KeyError:
        raise KeyError(f"unknown process {pid}") from None
    if not subs:
        raise ValueError(f"process {pid} is not a learner")
    replicas = frozenset(q for q, s in cfg.subscriptions.items() if s == subs)
    return Partition(subs, replicas)


def reply_partition(cfg: ClusterConfig, pid: ProcessId) -> GroupId:
    """Partition id a learner stamps on client replies: its lowest non-global group."""
    subs = sorted(cfg.process(pid).subscriptions)
    own = [g for g in subs if g != cfg.service.global_group]
    return own[0] if own else subs[0]


# --- parsing -----------------------------------------------------------------

_TUNING_KEYS = {
    "m": ("merge_window", int),
    "delta_ms": ("delta_ms", float),
    "lambda": ("max_rate", float),
    "batch_limit": ("batch_limit", int),
    "buffer_slots": ("buffer_slots", int),
    "slot_size": ("slot_size", int),
    "checkpoint_interval": ("checkpoint_interval", int),
    "phase1_window": ("phase1_window", int),
    "log_mode": ("log_mode", str),
    "rate_leveling": ("rate_leveling", "bool"),
    "retry_ms": ("retry_ms", float),
    "trim_interval_ms": ("trim_interval_ms", float),
    "max_inflight": ("max_inflight", int),
}

_SERVICE_KEYS = {
    "kind", "global_group", "partition_mode", "partition_groups", "range_splits",
    "log_groups", "cache_limit", "segment_sync",
}


def _ints(text: str) -> list[int]:
    return [int(tok) for tok in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _section_id(name: str, kind: str) -> int:
    try:
        return int(name[len(kind):].strip())
    except ValueError:
        raise ConfigError(f"bad section header [{name}]") from None


def _check_keys(section: str, keys: Iterable[str], allowed: set[str]) -> None:
    unknown = sorted(set(keys) - allowed)
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {unknown}")


def parse_config(text: str) -> ClusterConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                       interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc}") from exc

    rings, procs = [], []
    tuning_kw: dict = {}
    service_kw: dict = {}
    try:
        for name in parser.sections():
            sec = parser[name]
            if name.startswith("ring"):
                _check_keys(name, sec.keys(), {"members", "acceptors", "coordinator"})
                for key in ("members", "acceptors", "coordinator"):
                    if key not in sec:
                        raise ConfigError(f"[{name}]: missing {key}")
                rings.append(RingConfig(
                    group=_section_id(name, "ring"),
                    members=tuple(_ints(sec["members"])),
                    acceptors=frozenset(_ints(sec["acceptors"])),
                    coordinator=int(sec["coordinator"]),
                ))
            elif name.startswith("process"):
                _check_keys(name, sec.keys(), {"address", "subscriptions", "roles", "data_dir"})
                roles = sec.get("roles", "").replace(",", " ").split()
                try:
                    role_set = frozenset(Role(r) for r in roles)
                except ValueError as exc:
                    raise ConfigError(f"[{name}]: {exc}") from None
                procs.append(ProcessConfig(
                    pid=_section_id(name, "process"),
                    address=sec.get("address", ""),
                    subscriptions=frozenset(_ints(sec.get("subscriptions", ""))),
                    roles=role_set,
                    data_dir=sec.get("data_dir", ""),
                ))
            elif name == "tuning":
                _check_keys(name, sec.keys(), set(_TUNING_KEYS))
                for key, raw in sec.items():
                    attr, conv = _TUNING_KEYS[key]
                    tuning_kw[attr] = _bool(raw) if conv == "bool" else conv(raw)
            elif name == "service":
                _check_keys(name, sec.keys(), _SERVICE_KEYS)
                for key, raw in sec.items():
                    if key in ("global_group", "cache_limit"):
                        service_kw[key] = int(raw)
                    elif key == "partition_groups":
                        service_kw[key] = tuple(_ints(raw))
                    elif key == "range_splits":
                        service_kw[key] = tuple(raw.split())
                    elif key == "log_groups":
                        pairs = []
                        for tok in raw.replace(",", " ").split():
                            log_id, _, group = tok.partition(":")
                            pairs.append((int(log_id), int(group)))
                        service_kw[key] = tuple(pairs)
                    elif key == "segment_sync":
                        service_kw[key] = _bool(raw)
                    else:
                        service_kw[key] = raw.strip()
            else:
                raise ConfigError(f"unknown section [{name}]")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"parse error: {exc}") from exc

    if not rings:
        raise ConfigError("no rings declared")
    return ClusterConfig(tuple(rings), tuple(procs), Tuning(**tuning_kw),
                         ServiceConfig(**service_kw))


def load_config(source: str | Path) -> ClusterConfig:
    """Load and validate a configuration from a path or from document text."""
    if isinstance(source, Path) or ("\n" not in source and Path(source).exists()):
        text = Path(source).read_text()
    else:
        text = source
    return parse_config(text)


def dumps_config(cfg: ClusterConfig) -> str:
    """Serialize a configuration back into the document format."""
    out = []
    for r in cfg.rings:
        out.append(f"[ring {r.group}]")
        out.append("members = " + " ".join(map(str, r.members)))
        out.append("acceptors = " + " ".join(map(str, sorted(r.acceptors))))
        out.append(f"coordinator = {r.coordinator}")
        out.append("")
    for p in cfg.processes:
        out.append(f"[process {p.pid}]")
        if p.address:
            out.append(f"address = {p.address}")
        out.append("subscriptions = " + " ".join(map(str, sorted(p.subscriptions))))
        out.append("roles = " + " ".join(sorted(r.value for r in p.roles)))
        if p.data_dir:
            out.append(f"data_dir = {p.data_dir}")
        out.append("")
    out.append("[tuning]")
    inverse = {attr: key for key, (attr, _) in _TUNING_KEYS.items()}
    for f in fields(Tuning):
        val = getattr(cfg.tuning, f.name)
        out.append(f"{inverse[f.name]} = {str(val).lower() if isinstance(val, bool) else val}")
    out.append("")
    svc = cfg.service
    out.append("[service]")
    out.append(f"kind = {svc.kind}")
    if svc.global_group is not None:
        out.append(f"global_group = {svc.global_group}")
    out.append(f"partition_mode = {svc.partition_mode}")
    if svc.partition_groups:
        out.append("partition_groups = " + " ".join(map(str, svc.partition_groups)))
    if svc.range_splits:
        out.append("range_splits = " + " ".join(svc.range_splits))
    if svc.log_groups:
        out.append("log_groups = " + " ".join(f"{l}:{g}" for l, g in svc.log_groups))
    out.append(f"cache_limit = {svc.cache_limit}")
    out.append(f"segment_sync = {str(svc.segment_sync).lower()}")
    return "\n".join(out) + "\n"


def simple_cluster(
    ring_acceptors: Mapping[GroupId, int] | int = 1,
    learners: Mapping[ProcessId, Iterable[GroupId]] | None = None,
    *,
    tuning: Tuning | None = None,
    service: ServiceConfig | None = None,
    base_port: int = 0,
) -> ClusterConfig:
    """Build a configuration programmatically.

    Each ring gets its own acceptors (which are also proposers); learners join
    every ring they subscribe to, after the acceptors in ring order.
    ``ring_acceptors`` maps group -> acceptor count, or is a ring count with
    three acceptors per ring.
    """
    if isinstance(ring_acceptors, int):
        ring_acceptors = {g: 3 for g in range(ring_acceptors)}
    learners = learners or {}
    next_pid = 0
    acceptors: dict[GroupId, list[int]] = {}
    for g in sorted(ring_acceptors):
        acceptors[g] = list(range(next_pid, next_pid + ring_acceptors[g]))
        next_pid += ring_acceptors[g]
    learner_pids = sorted(learners)
    if learner_pids and min(learner_pids) < next_pid:
        raise ConfigError(f"learner ids must be >= {next_pid}")
    rings = []
    for g, accs in acceptors.items():
        members = accs + [pid for pid in learner_pids if g in set(learners[pid])]
        rings.append(RingConfig(g, tuple(members), frozenset(accs), accs[0]))
    procs = []
    for accs in acceptors.values():
        for pid in accs:
            procs.append(ProcessConfig(
                pid, f"127.0.0.1:{base_port + pid}" if base_port else "",
                frozenset(), frozenset({Role.PROPOSER, Role.ACCEPTOR})))
    for pid in learner_pids:
        procs.append(ProcessConfig(
            pid, f"127.0.0.1:{base_port + pid}" if base_port else "",
            frozenset(learners[pid]), frozenset({Role.PROPOSER, Role.LEARNER})))
    return ClusterConfig(tuple(rings), tuple(procs), tuning or Tuning(),
                         service or ServiceConfig())
