"""Minimal file storage used by acceptor logs, checkpoints and dLog segments.

Two backends share one interface: ``DirDisk`` writes real files and fsyncs,
``MemDisk`` keeps bytes in memory and models durability explicitly so the
simulator can crash a process and keep exactly what had been synced.
"""

from __future__ import annotations

import os
from pathlib import Path


class Disk:
    def read(self, name: str) -> bytes | None:
        raise NotImplementedError

    def read_at(self, name: str, offset: int, size: int) -> bytes:
        data = self.read(name)
        if data is None:
            raise FileNotFoundError(name)
        return data[offset:offset + size]

    def size(self, name: str) -> int:
        data = self.read(name)
        return 0 if data is None else len(data)

    def append(self, name: str, data: bytes) -> int:
        """Append without forcing durability; returns the offset written at."""
        raise NotImplementedError

    def sync(self, name: str) -> None:
        raise NotImplementedError

    def replace(self, name: str, data: bytes) -> None:
        """Atomically and durably replace the whole file."""
        raise NotImplementedError

    def delete(self, name: str) -> None:
        raise NotImplementedError

    def list(self, prefix: str = "") -> list[str]:
        raise NotImplementedError

    def exists(self, name: str) -> bool:
        return self.read(name) is not None


class MemDisk(Disk):
    def __init__(self):
        self._files: dict[str, bytearray] = {}
        self._durable: dict[str, int] = {}
        self.syncs = 0

    def read(self, name):
        f = self._files.get(name)
        return None if f is None else bytes(f)

    def read_at(self, name, offset, size):
        f = self._files.get(name)
        if f is None:
            raise FileNotFoundError(name)
        return bytes(f[offset:offset + size])

    def size(self, name):
        f = self._files.get(name)
        return 0 if f is None else len(f)

    def append(self, name, data):
        f = self._files.setdefault(name, bytearray())
        self._durable.setdefault(name, 0)
        off = len(f)
        f += data
        return off

    def sync(self, name):
        if name in self._files:
            self._durable[name] = len(self._files[name])
            self.syncs += 1

    def replace(self, name, data):
        self._files[name] = bytearray(data)
        self._durable[name] = len(data)
        self.syncs += 1

    def delete(self, name):
        self._files.pop(name, None)
        self._durable.pop(name, None)

    def list(self, prefix=""):
        return sorted(n for n in self._files if n.startswith(prefix))

    def crash(self) -> None:
        """Lose every byte that was not synced."""
        for name in list(self._files):
            keep = self._durable.get(name, 0)
            del self._files[name][keep:]

    def unsynced(self, name: str) -> int:
        return len(self._files.get(name, b"")) - self._durable.get(name, 0)


class DirDisk(Disk):
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._fds: dict[str, int] = {}

    def _path(self, name: str) -> Path:
        return self.root / name

    def _fd(self, name: str) -> int:
        fd = self._fds.get(name)
        if fd is None:
            fd = os.open(self._path(name), os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
            self._fds[name] = fd
        return fd

    def read(self, name):
        try:
            return self._path(name).read_bytes()
        except FileNotFoundError:
            return None

    def read_at(self, name, offset, size):
        with open(self._path(name), "rb") as fh:
            fh.seek(offset)
            return fh.read(size)

    def size(self, name):
        try:
            return self._path(name).stat().st_size
        except FileNotFoundError:
            return 0

    def append(self, name, data):
        fd = self._fd(name)
        off = os.lseek(fd, 0, os.SEEK_END)
        view = memoryview(data)
        while view:
            n = os.write(fd, view)
            view = view[n:]
        return off

    def sync(self, name):
        if name in self._fds:
            os.fsync(self._fds[name])

    def replace(self, name, data):
        self._close(name)
        tmp = self._path(name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._path(name))
        dfd = os.open(self.root, os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)

    def delete(self, name):
        self._close(name)
        try:
            self._path(name).unlink()
        except FileNotFoundError:
            pass

    def list(self, prefix=""):
        return sorted(p.name for p in self.root.iterdir()
                      if p.name.startswith(prefix) and not p.name.endswith(".tmp"))

    def _close(self, name: str) -> None:
        fd = self._fds.pop(name, None)
        if fd is not None:
            os.close(fd)

    def close(self) -> None:
        for name in list(self._fds):
            self._close(name)
