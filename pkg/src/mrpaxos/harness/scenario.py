"""Replayable simulator scenarios.

A scenario file holds a configuration reference, load phases and scripted
events::

    config cluster.ini          # resolved relative to the scenario file
    seed 7                      # default seed, overridable on the command line
    until 3000                  # give up settling after this many virtual ms
    load 0 2000 500 * 64        # from_ms to_ms rate_per_s group|* size
    at 500 crash 3
    at 900 restart 3
    at 1200 checkpoint 6
    at 1300 trim 0

``load`` expands into evenly spaced ``propose`` events; ``*`` cycles over
all groups.  Same scenario and seed always give the same trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from mrpaxos.core import ClusterConfig, load_config
from mrpaxos.harness.checker import CheckReport, check_trace
from mrpaxos.transport.simnet import SimEvent, SimNet, SimParams, Trace, parse_workload


@dataclass(frozen=True)
class LoadPhase:
    start_ms: float
    end_ms: float
    rate: float
    group: int | None
    size: int

    def events(self, groups: list[int]) -> list[SimEvent]:
        if self.rate <= 0 or self.end_ms <= self.start_ms:
            return []
        step = 1000.0 / self.rate
        out, t, i = [], self.start_ms, 0
        while t < self.end_ms:
            g = self.group if self.group is not None else groups[i % len(groups)]
            out.append(SimEvent(round(t, 3), "propose", (g, self.size)))
            t += step
            i += 1
        return out


@dataclass
class Scenario:
    config: ClusterConfig
    events: list[SimEvent] = field(default_factory=list)
    loads: list[LoadPhase] = field(default_factory=list)
    seed: int = 0
    until_ms: float = 60_000.0

    def all_events(self) -> list[SimEvent]:
        evs = list(self.events)
        for ph in self.loads:
            evs += ph.events(self.config.groups)
        return sorted(evs, key=lambda e: e.at_ms)


def parse_scenario(text: str, base_dir: str | Path = ".", config: ClusterConfig | None = None) -> Scenario:
    cfg = config
    seed, until = 0, 60_000.0
    loads: list[LoadPhase] = []
    at_lines: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        if head == "config":
            if cfg is None:
                cfg = load_config(Path(base_dir) / rest)
        elif head == "seed":
            seed = int(rest)
        elif head == "until":
            until = float(rest)
        elif head == "load":
            parts = rest.split()
            if len(parts) != 5:
                raise ValueError(f"line {lineno}: load takes from_ms to_ms rate group size")
            g = None if parts[3] == "*" else int(parts[3])
            loads.append(LoadPhase(float(parts[0]), float(parts[1]), float(parts[2]), g,
                                   int(parts[4])))
        elif head == "at":
            at_lines.append(line)
        else:
            raise ValueError(f"line {lineno}: unknown directive {head!r}")
    if cfg is None:
        raise ValueError("scenario names no config")
    return Scenario(cfg, parse_workload("\n".join(at_lines)), loads, seed, until)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path.parent)


@dataclass
class ScenarioResult:
    net: SimNet
    report: CheckReport | None

    @property
    def trace(self) -> Trace:
        return self.net.trace


def run_scenario(sc: Scenario, seed: int | None = None, check: bool = True,
                 params: SimParams | None = None, max_events: int = 20_000_000) -> ScenarioResult:
    net = SimNet(sc.config, sc.seed if seed is None else seed, params=params)
    net.schedule(sc.all_events())
    net.run_to_quiescence(sc.until_ms, max_events=max_events)
    return ScenarioResult(net, check_trace(net.trace, sc.config) if check else None)


def random_scenario(seed: int, *, rings: tuple[int, int] = (1, 3), learners: tuple[int, int] = (3, 5),
                    multicasts: tuple[int, int] = (200, 1000), load_ms: float = 600.0,
                    faults: bool = True) -> Scenario:
    """A random configuration, load and fault schedule for property campaigns.

    Each ring has three acceptors, of which at most one (a minority) is
    crashed and later restarted.  Learners get random subscriptions; a
    minority of each partition may crash and restart as well.  Checkpoints
    and trims are frequent so recovery paths run often.
    """
    import random

    from mrpaxos.core import Tuning, simple_cluster

    rng = random.Random(seed)
    n_rings = rng.randint(*rings)
    groups = list(range(n_rings))
    n_learners = rng.randint(*learners)
    first = 3 * n_rings
    subs: dict[int, list[int]] = {}
    for i in range(n_learners):
        k = rng.randint(1, n_rings)
        subs[first + i] = sorted(rng.sample(groups, k))
    for g in groups:
        # every ring gets at least one subscriber
        if not any(g in s for s in subs.values()):
            subs[rng.choice(sorted(subs))].append(g)
    subs = {p: sorted(set(s)) for p, s in subs.items()}
    tuning = Tuning(merge_window=rng.choice([1, 1, 2]),
                    checkpoint_interval=rng.choice([25, 50, 100]),
                    trim_interval_ms=rng.choice([40.0, 80.0]),
                    retry_ms=50.0)
    cfg = simple_cluster(n_rings, subs, tuning=tuning)

    n_msgs = rng.randint(*multicasts)
    events = [SimEvent(round(rng.uniform(5.0, load_ms), 3), "propose",
                       (rng.choice(groups), rng.randint(8, 512))) for _ in range(n_msgs)]
    if faults:
        for ring in cfg.rings:
            if rng.random() < 0.7:
                victim = rng.choice(sorted(ring.acceptors))
                down = rng.uniform(20.0, load_ms)
                events.append(SimEvent(round(down, 3), "crash", (victim,)))
                events.append(SimEvent(round(down + rng.uniform(20.0, 300.0), 3), "restart",
                                       (victim,)))
        for part in cfg.partitions():
            members = sorted(part.replicas)
            for victim in rng.sample(members, rng.randint(0, (len(members) - 1) // 2)):
                down = rng.uniform(20.0, load_ms)
                events.append(SimEvent(round(down, 3), "crash", (victim,)))
                events.append(SimEvent(round(down + rng.uniform(20.0, 300.0), 3), "restart",
                                       (victim,)))
    events.sort(key=lambda e: e.at_ms)
    return Scenario(cfg, events, [], seed, until_ms=30_000.0)
