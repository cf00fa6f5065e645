"""Throughput and latency reports.

CSV schema, one row per (second, ring) with at least one completed operation::

    second,ring,ops,bytes,p50_ms,p90_ms,p99_ms

``second`` counts from the start of the measurement window; ``ring`` is the
group the operation was multicast to.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = ("second", "ring", "ops", "bytes", "p50_ms", "p90_ms", "p99_ms")


@dataclass(frozen=True)
class Sample:
    t: float            # completion time, seconds since window start
    ring: int
    size: int
    latency_ms: float


@dataclass
class MetricsReport:
    duration: float
    samples: list[Sample] = field(default_factory=list)

    def add(self, t: float, ring: int, size: int, latency_ms: float) -> None:
        if 0 <= t < self.duration:
            self.samples.append(Sample(t, ring, size, latency_ms))

    @property
    def total_ops(self) -> int:
        return len(self.samples)

    def per_ring_ops(self) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for s in self.samples:
            out[s.ring] += 1
        return dict(sorted(out.items()))

    @property
    def throughput(self) -> float:
        """Operations per second over the window; 0 for an empty window."""
        return self.total_ops / self.duration if self.duration > 0 else 0.0

    @property
    def bytes_per_second(self) -> float:
        return sum(s.size for s in self.samples) / self.duration if self.duration > 0 else 0.0

    def quantiles(self, ring: int | None = None) -> tuple[float, float, float]:
        lat = [s.latency_ms for s in self.samples if ring is None or s.ring == ring]
        if not lat:
            return (0.0, 0.0, 0.0)
        q = np.percentile(np.asarray(lat, dtype=float), [50, 90, 99])
        return float(q[0]), float(q[1]), float(q[2])

    def rows(self) -> list[tuple]:
        groups: dict[tuple[int, int], list[Sample]] = defaultdict(list)
        for s in self.samples:
            groups[(int(s.t), s.ring)].append(s)
        out = []
        for (sec, ring), ss in sorted(groups.items()):
            lat = np.asarray([s.latency_ms for s in ss], dtype=float)
            q = np.percentile(lat, [50, 90, 99])
            out.append((sec, ring, len(ss), sum(s.size for s in ss),
                        round(float(q[0]), 3), round(float(q[1]), 3), round(float(q[2]), 3)))
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.rows())
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary(self) -> str:
        p50, p90, p99 = self.quantiles()
        rings = ", ".join(f"ring {r}: {n}" for r, n in self.per_ring_ops().items())
        return (f"{self.total_ops} ops in {self.duration:.1f}s = {self.throughput:.1f} ops/s "
                f"({self.bytes_per_second * 8 / 1e6:.2f} Mbps); latency p50 {p50:.2f} ms "
                f"p90 {p90:.2f} ms p99 {p99:.2f} ms; {rings or 'no rings'}")


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def csv_throughput(path, duration: float | None = None) -> float:
    """Aggregate ops/s from a CSV written by :meth:`MetricsReport.to_csv`."""
    rows = read_csv(path)
    if not rows:
        return 0.0
    secs = duration or (max(r["second"] for r in rows) + 1)
    return sum(r["ops"] for r in rows) / secs
