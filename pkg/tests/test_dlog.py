import struct

import pytest

from mrpaxos.core import ServiceConfig, simple_cluster
from mrpaxos.harness.simclient import CLIENT_BASE, SimClient
from mrpaxos.services import dlog as dl
from mrpaxos.services.base import BAD_REQUEST, NOT_FOUND, OK, TRIMMED
from mrpaxos.services.client import dlog_plan, dlog_result
from mrpaxos.storage import DirDisk, MemDisk
from mrpaxos.transport.simnet import SimNet

DIRECTORY = dl.LogDirectory({1: 0, 2: 1}, global_group=2)


def service(cache_limit=1 << 20, disk=None, groups=(0, 1, 2)):
    return dl.Dlog(DIRECTORY, groups, disk or MemDisk(), cache_limit)


def pos(reply):
    return struct.unpack(">Q", reply[1])[0]


def test_first_append_position_zero_and_read_back():
    s = service()
    assert pos(s.apply(dl.append(1, b"a"))) == 0
    assert pos(s.apply(dl.append(1, b"b"))) == 1
    assert s.apply(dl.read(1, 1)) == (OK, b"b")
    assert s.apply(dl.read(1, 2))[0] == NOT_FOUND


def test_trim_semantics():
    s = service()
    for i in range(5):
        s.apply(dl.append(1, b"%d" % i))
    assert s.apply(dl.trim(1, 3))[0] == OK
    assert s.apply(dl.read(1, 2))[0] == TRIMMED
    assert s.apply(dl.read(1, 3)) == (OK, b"3")
    once = s.digest()
    s.apply(dl.trim(1, 3))
    s.apply(dl.trim(1, 1))
    assert s.digest() == once
    assert pos(s.apply(dl.append(1, b"x"))) == 5
    assert s.apply(dl.trim(1, 99))[0] == BAD_REQUEST


def test_trim_to_end_keeps_counter():
    s = service()
    for i in range(3):
        s.apply(dl.append(2, b"v"))
    s.apply(dl.trim(2, 3))
    assert s.logs[2].next_position == 3
    assert pos(s.apply(dl.append(2, b"w"))) == 3


def test_trim_starts_new_segment_and_drops_old(tmp_path):
    disk = DirDisk(tmp_path)
    s = service(disk=disk)
    for i in range(4):
        s.apply(dl.append(1, b"v"))
    s.apply(dl.trim(1, 4))
    names = disk.list("dlog-1-")
    assert names == [f"dlog-1-{4:020d}.seg"]
    data = disk.read(names[0])
    assert struct.unpack(">IQ", data[:12]) == (1, 4)


def test_multi_append_positions_per_log():
    s = service()
    s.apply(dl.append(1, b"a"))
    status, body = s.apply(dl.multi_append([1, 2], b"m"))
    assert status == OK and dl.decode_positions(body) == {1: 1, 2: 0}
    assert s.apply(dl.read(1, 1)) == s.apply(dl.read(2, 0)) == (OK, b"m")


def test_singleton_multi_append_equals_append():
    a, b = service(), service()
    a.apply(dl.append(1, b"v"))
    b.apply(dl.multi_append([1], b"v"))
    assert a.digest() == b.digest()
    assert DIRECTORY.route(dl.multi_append([1], b"v")) == 0


def test_unknown_log_rejected_before_multicast():
    with pytest.raises(KeyError):
        DIRECTORY.route(dl.multi_append([1, 7], b"v"))
    assert DIRECTORY.route(dl.multi_append([1, 2], b"v")) == 2


def test_cache_evicted_read_served_from_disk(tmp_path):
    s = service(cache_limit=1000, disk=DirDisk(tmp_path))
    vals = [bytes([i]) * 100 for i in range(30)]
    for v in vals:
        s.apply(dl.append(1, v))
    assert (1, 0) not in s.cache
    assert s.apply(dl.read(1, 0)) == (OK, vals[0])
    assert s.disk_reads == 1
    assert s.apply(dl.read(1, 29)) == (OK, vals[29])
    assert s.disk_reads == 1


def test_snapshot_restore_roundtrip():
    s = service()
    for i in range(6):
        s.apply(dl.append(1, b"%d" % i))
    s.apply(dl.trim(1, 2))
    s.apply(dl.multi_append([1, 2], b"m"))
    t = service()
    t.restore(s.snapshot())
    assert t.digest() == s.digest()
    assert t.apply(dl.read(1, 6)) == (OK, b"m")
    assert t.apply(dl.read(1, 1))[0] == TRIMMED


def test_command_roundtrip_and_errors():
    for c in (dl.append(3, b"x"), dl.multi_append([5, 1], b"y"), dl.read(1, 9), dl.trim(2, 4)):
        assert dl.DlogCommand.decode(c.encode()) == c
    with pytest.raises(ValueError):
        dl.multi_append([], b"")
    assert service().execute(0, 1, 1, b"\x02\x00\x00")[0] == BAD_REQUEST


def dlog_cluster():
    learners = {9: [0, 2], 10: [0, 2], 11: [1, 2], 12: [1, 2]}
    return simple_cluster(3, learners, service=ServiceConfig(
        kind="dlog", global_group=2, log_groups=((1, 0), (2, 1))))


def test_concurrent_multi_appends_ordered_alike_everywhere():
    cfg = dlog_cluster()
    net = SimNet(cfg, 5)
    directory = dl.LogDirectory.from_config(cfg)
    clients = [SimClient(net, CLIENT_BASE + i) for i in range(4)]
    results = []
    for i in range(40):
        cmd = dl.multi_append([1, 2], b"m%d" % i) if i % 3 else dl.append(1 + i % 2, b"a%d" % i)
        target, needed = dlog_plan(directory, cmd)
        c = clients[i % 4]
        net.call_at(5 + i * 0.2, lambda c=c, t=target, e=cmd.encode(), n=needed, cmd=cmd:
                    c.submit(t, e, n, lambda p, cmd=cmd: results.append(dlog_result(cmd, p))))
    net.run_until(3000)
    assert len(results) == 40 and all(s == OK for s, _ in results)
    logs = {}
    for p in (9, 10, 11, 12):
        svc = net.nodes[p].replica.service
        for l, st in svc.logs.items():
            seq = [svc.apply(dl.read(l, i))[1] for i in range(st.next_position)]
            logs.setdefault(l, set()).add(tuple(seq))
    assert all(len(v) == 1 for v in logs.values())
    seq1, = logs[1]
    seq2, = logs[2]
    m1 = [v for v in seq1 if v.startswith(b"m")]
    m2 = [v for v in seq2 if v.startswith(b"m")]
    assert m1 == m2 and len(m1) == 26
    # positions in the reply agree with what a read returns
    for s, body in results:
        if isinstance(body, dict):
            assert set(body) == {1, 2}
