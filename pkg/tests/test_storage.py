from mrpaxos.storage import DirDisk, MemDisk


def test_memdisk_crash_keeps_synced_prefix():
    d = MemDisk()
    d.append("a", b"123")
    d.sync("a")
    d.append("a", b"456")
    assert d.unsynced("a") == 3
    d.crash()
    assert d.read("a") == b"123"
    d.replace("b", b"xyz")
    d.crash()
    assert d.read("b") == b"xyz"


def test_dirdisk_append_read_replace(tmp_path):
    d = DirDisk(tmp_path)
    assert d.append("log", b"abc") == 0
    assert d.append("log", b"def") == 3
    d.sync("log")
    assert d.read_at("log", 2, 3) == b"cde"
    assert d.size("log") == 6
    d.replace("ck", b"1")
    d.replace("ck", b"2")
    assert d.read("ck") == b"2"
    assert d.list() == ["ck", "log"]
    d.delete("ck")
    assert not d.exists("ck")
    assert d.read("missing") is None
    d.close()
    assert DirDisk(tmp_path).read("log") == b"abcdef"
