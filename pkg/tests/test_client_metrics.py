import pytest

from mrpaxos.harness.metrics import CSV_HEADER, MetricsReport, csv_throughput, read_csv
from mrpaxos.messages import ClientReply
from mrpaxos.services.client import ClientCore


def test_pending_completes_after_every_partition():
    core = ClientCore(5, timeout=1.0)
    done = []
    p = core.submit(3, b"scan", {0, 1}, now=0.0, on_done=done.append)
    assert core.on_reply(ClientReply(p.seq, 0, 0, b"a")) is None
    assert core.on_reply(ClientReply(p.seq, 7, 0, b"stray")) is None
    assert core.on_reply(ClientReply(p.seq, 1, 0, b"b")) is p
    assert done == [p] and not core.pending
    assert core.on_reply(ClientReply(p.seq, 1, 0, b"late")) is None


def test_first_reply_per_partition_kept():
    core = ClientCore(5)
    p = core.submit(0, b"r", {0, 1}, now=0.0)
    core.on_reply(ClientReply(p.seq, 0, 0, b"first"))
    core.on_reply(ClientReply(p.seq, 0, 0, b"second"))
    assert p.replies[0].body == b"first"


def test_timeouts_resend_same_sequence():
    core = ClientCore(5, timeout=0.5)
    p = core.submit(0, b"x", {0}, now=0.0)
    assert core.due(0.4) == []
    (again,) = core.due(0.6)
    assert again.seq == p.seq and again.attempts == 2
    assert core.due(0.7) == []


def test_zero_duration_report():
    r = MetricsReport(0.0)
    r.add(0.0, 0, 10, 1.0)
    assert r.total_ops == 0 and r.throughput == 0.0 and r.bytes_per_second == 0.0
    assert r.quantiles() == (0.0, 0.0, 0.0)
    assert r.to_csv().strip() == ",".join(CSV_HEADER)


def test_per_ring_conservation_and_csv(tmp_path):
    r = MetricsReport(2.0)
    for i in range(100):
        r.add(i * 0.02, i % 3, 512, float(i))
    r.add(5.0, 0, 512, 1.0)      # outside the window
    assert sum(r.per_ring_ops().values()) == r.total_ops == 100
    assert r.throughput == 50.0
    path = tmp_path / "out.csv"
    r.to_csv(path)
    rows = read_csv(path)
    assert sum(row["ops"] for row in rows) == 100
    assert csv_throughput(path, 2.0) == pytest.approx(50.0)
    p50, p90, p99 = r.quantiles()
    assert p50 <= p90 <= p99
    assert "100 ops" in r.summary()
