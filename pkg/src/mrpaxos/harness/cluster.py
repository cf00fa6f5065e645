"""Launch a configuration as local operating-system processes."""

from __future__ import annotations

import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

from mrpaxos.core import ClusterConfig, dumps_config


def free_ports(n: int) -> list[int]:
    socks, ports = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def free_port_range(n: int, lo: int = 20000, hi: int = 60000, attempts: int = 200) -> int:
    """Base of ``n`` consecutive ports that are currently free."""
    import random
    rng = random.Random()
    for _ in range(attempts):
        base = rng.randrange(lo, hi - n)
        socks = []
        try:
            for port in range(base, base + n):
                s = socket.socket()
                socks.append(s)
                s.bind(("127.0.0.1", port))
            return base
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
    raise RuntimeError(f"no {n} consecutive free ports found")


class LocalCluster:
    """One ``mrpaxos node`` subprocess per configured process.

    Each process gets ``<workdir>/<pid>`` as its data directory, which survives
    :meth:`kill` so a restarted process finds its stable log.
    """

    def __init__(self, cfg: ClusterConfig, workdir: str | Path, log_level: str = "WARNING"):
        self.cfg = cfg
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.config_path = self.workdir / "cluster.ini"
        self.config_path.write_text(dumps_config(cfg))
        self.log_level = log_level
        self.procs: dict[int, subprocess.Popen] = {}

    def start(self, pid: int | None = None) -> None:
        pids = [p.pid for p in self.cfg.processes] if pid is None else [pid]
        env = dict(os.environ, MRPAXOS_LOG=self.log_level)
        for p in pids:
            out = open(self.workdir / f"node-{p}.log", "ab")
            self.procs[p] = subprocess.Popen(
                [sys.executable, "-m", "mrpaxos.harness.cli", "node",
                 "--config", str(self.config_path), "--id", str(p),
                 "--data-dir", str(self.workdir / str(p))],
                stdout=out, stderr=subprocess.STDOUT, env=env)
            out.close()

    def wait_listening(self, timeout: float = 15.0) -> None:
        deadline = time.monotonic() + timeout
        for p in self.cfg.processes:
            if p.pid not in self.procs:
                continue
            host, port = p.host_port
            while True:
                try:
                    socket.create_connection((host, port), timeout=0.2).close()
                    break
                except OSError:
                    if self.procs[p.pid].poll() is not None:
                        raise RuntimeError(f"process {p.pid} exited early; see node-{p.pid}.log")
                    if time.monotonic() > deadline:
                        raise TimeoutError(f"process {p.pid} not listening on {port}")
                    time.sleep(0.05)

    def kill(self, pid: int, sig: int = signal.SIGKILL) -> None:
        proc = self.procs.pop(pid, None)
        if proc is not None and proc.poll() is None:
            proc.send_signal(sig)
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def restart(self, pid: int) -> None:
        self.kill(pid)
        self.start(pid)

    def stop(self) -> None:
        for pid in list(self.procs):
            self.kill(pid, signal.SIGTERM)

    def __enter__(self) -> "LocalCluster":
        self.start()
        self.wait_listening()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
