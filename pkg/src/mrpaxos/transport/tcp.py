"""Stream transport: one asyncio event loop per process.

Each process keeps an outgoing connection to every peer for sending and accepts
incoming connections for receiving.  A peer counts as up while the outgoing
connection is established, which is how rings route around crashed members.

Every connection starts with a handshake::

    b"MRPX" | u8 kind (0 peer, 1 client) | 32 byte config digest | u32 sender id

Peers with a different configuration digest are disconnected.  Clients send
requests on their connection and receive replies on the same stream.
"""

from __future__ import annotations

import asyncio
import logging
import struct
from pathlib import Path
from typing import Callable

from mrpaxos.core import ClusterConfig
from mrpaxos.messages import ClientReply
from mrpaxos.node import Node
from mrpaxos.services import make_service
from mrpaxos.storage import DirDisk
from mrpaxos.transport.codec import CodecError, Envelope, FrameReader, MsgType, encode

log = logging.getLogger(__name__)

MAGIC = b"MRPX"
PEER, CLIENT = 0, 1
_HELLO = struct.Struct(">4sB32sI")
RECONNECT_S = 0.05


class HandshakeError(ConnectionError):
    pass


def hello(kind: int, digest: bytes, sender: int) -> bytes:
    return _HELLO.pack(MAGIC, kind, digest, sender)


async def read_hello(reader: asyncio.StreamReader, digest: bytes) -> tuple[int, int]:
    data = await reader.readexactly(_HELLO.size)
    magic, kind, peer_digest, sender = _HELLO.unpack(data)
    if magic != MAGIC:
        raise HandshakeError("bad magic")
    if peer_digest != digest:
        raise HandshakeError(f"configuration digest mismatch from {kind}:{sender}")
    return kind, sender


def _wire(env: Envelope) -> bytes:
    # size limits are enforced where values enter the system
    return encode(env, max_payload=None)


class TcpRuntime:
    def __init__(self, cfg: ClusterConfig, pid: int, data_dir: str | Path | None = None):
        self.cfg = cfg
        self.pid = pid
        self.digest = cfg.digest()
        pc = cfg.process(pid)
        self.data_dir = Path(data_dir or pc.data_dir or f"data/{pid}")
        self.disk = DirDisk(self.data_dir)
        self.loop: asyncio.AbstractEventLoop | None = None
        self.out: dict[int, asyncio.StreamWriter] = {}
        self.clients: dict[int, asyncio.StreamWriter] = {}
        self.node: Node | None = None
        self._flush_pending = False
        self._tasks: list[asyncio.Task] = []
        self._server: asyncio.base_events.Server | None = None
        self._stopping: asyncio.Event | None = None

    # --- Runtime interface ------------------------------------------------------

    def now(self) -> float:
        return self.loop.time()

    def send(self, dst: int, env: Envelope) -> None:
        w = self.out.get(dst)
        if w is not None and not w.is_closing():
            w.write(_wire(env))

    def reply(self, client: int, env: Envelope) -> None:
        w = self.clients.get(client)
        if w is not None and not w.is_closing():
            w.write(_wire(env))

    def call_later(self, delay: float, fn: Callable[[], None]):
        return self.loop.call_later(delay, fn)

    def is_up(self, pid: int) -> bool:
        w = self.out.get(pid)
        return w is not None and not w.is_closing()

    def trace(self, kind: str, *data) -> None:
        if log.isEnabledFor(logging.DEBUG):
            log.debug("%s %s", kind, data)

    # --- lifecycle ------------------------------------------------------------------

    async def start(self) -> None:
        self.loop = asyncio.get_running_loop()
        self._stopping = asyncio.Event()
        host, port = self.cfg.process(self.pid).host_port
        self._server = await asyncio.start_server(self._on_conn, host, port)
        self.node = Node(self.cfg, self.pid, self, self.disk,
                         make_service(self.cfg, self.pid, self.disk))
        for p in self.cfg.processes:
            if p.pid != self.pid:
                self._tasks.append(asyncio.create_task(self._dial(p.pid)))
        self.node.start()
        log.info("process %d listening on %s:%d", self.pid, host, port)

    async def serve_forever(self) -> None:
        await self.start()
        await self._stopping.wait()
        await self.close()

    def stop(self) -> None:
        if self._stopping is not None:
            self._stopping.set()

    async def close(self) -> None:
        if self.node is not None:
            self.node.stop()
            self.node.flush()
        for t in self._tasks:
            t.cancel()
        for w in list(self.out.values()) + list(self.clients.values()):
            w.close()
        if self._server is not None:
            self._server.close()
        self.disk.close()

    # --- connections -------------------------------------------------------------------

    async def _dial(self, peer: int) -> None:
        host, port = self.cfg.process(peer).host_port
        while True:
            try:
                reader, writer = await asyncio.open_connection(host, port)
            except OSError:
                await asyncio.sleep(RECONNECT_S)
                continue
            writer.write(hello(PEER, self.digest, self.pid))
            self.out[peer] = writer
            log.info("connected to %d", peer)
            try:
                # the receiving side never writes; EOF means the peer went away
                await reader.read()
            except (OSError, asyncio.IncompleteReadError):
                pass
            finally:
                if self.out.get(peer) is writer:
                    del self.out[peer]
                writer.close()
            log.info("lost connection to %d", peer)
            await asyncio.sleep(RECONNECT_S)

    async def _on_conn(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            kind, sender = await read_hello(reader, self.digest)
        except asyncio.IncompleteReadError:
            writer.close()  # port probes
            return
        except (HandshakeError, OSError) as exc:
            log.warning("rejecting connection: %s", exc)
            writer.close()
            return
        if kind == CLIENT:
            self.clients[sender] = writer
        frames = FrameReader()
        try:
            while True:
                data = await reader.read(1 << 16)
                if not data:
                    break
                for env in frames.feed(data):
                    self._dispatch(kind, sender, env)
                self._schedule_flush()
        except (CodecError, OSError) as exc:
            log.info("dropping connection from %d: %s", sender, exc)
        finally:
            if kind == CLIENT and self.clients.get(sender) is writer:
                del self.clients[sender]
            writer.close()

    def _dispatch(self, kind: int, sender: int, env: Envelope) -> None:
        if self.node is None or self.node.stopped:
            return
        if kind == CLIENT and env.msg_type != MsgType.CLIENT_REQUEST:
            return
        self.node.handle(sender, env)

    def _schedule_flush(self) -> None:
        # one flush (and one fsync) for everything that arrived in this loop iteration
        if not self._flush_pending:
            self._flush_pending = True
            self.loop.call_soon(self._flush)

    def _flush(self) -> None:
        self._flush_pending = False
        if self.node is not None:
            self.node.flush()


def run_node(cfg: ClusterConfig, pid: int, data_dir: str | Path | None = None) -> None:
    """Run one process until interrupted."""
    import signal

    rt = TcpRuntime(cfg, pid, data_dir)

    async def main():
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, rt.stop)
            except (NotImplementedError, RuntimeError):
                pass
        await rt.serve_forever()

    asyncio.run(main())


class TcpClient:
    """Asyncio client: one connection per contacted process, replies on the same stream."""

    def __init__(self, cfg: ClusterConfig, client_id: int, timeout: float = 1.0):
        from mrpaxos.services.client import ClientCore
        self.cfg = cfg
        self.client_id = client_id
        self.digest = cfg.digest()
        self.core = ClientCore(client_id, timeout)
        self.conns: dict[int, asyncio.StreamWriter] = {}
        self._readers: list[asyncio.Task] = []
        self._futures: dict[int, asyncio.Future] = {}
        self._rr = 0
        self._retry_task: asyncio.Task | None = None

    async def _conn(self, pid: int) -> asyncio.StreamWriter | None:
        w = self.conns.get(pid)
        if w is not None and not w.is_closing():
            return w
        host, port = self.cfg.process(pid).host_port
        try:
            reader, writer = await asyncio.open_connection(host, port)
        except OSError:
            return None
        writer.write(hello(CLIENT, self.digest, self.client_id))
        self.conns[pid] = writer
        self._readers.append(asyncio.create_task(self._read(reader)))
        return writer

    async def _read(self, reader: asyncio.StreamReader) -> None:
        frames = FrameReader()
        while True:
            try:
                data = await reader.read(1 << 16)
            except OSError:
                return
            if not data:
                return
            for env in frames.feed(data):
                if env.msg_type == MsgType.CLIENT_REPLY:
                    p = self.core.on_reply(ClientReply.decode(env.payload))
                    if p is not None:
                        fut = self._futures.pop(p.seq, None)
                        if fut is not None and not fut.done():
                            fut.set_result(p)

    async def _send(self, p) -> bool:
        # learners answer on the client's own connection, so open one to each
        for pid in self.cfg.learners_of(p.target):
            await self._conn(pid)
        cands = self.cfg.proposers_of(p.target)
        for i in range(len(cands)):
            pid = cands[(self._rr + i) % len(cands)]
            w = await self._conn(pid)
            if w is not None:
                self._rr += i + 1
                w.write(_wire(Envelope(MsgType.CLIENT_REQUEST, p.target, 0, p.request.encode())))
                return True
        self._rr += 1
        return False

    async def _retry_loop(self) -> None:
        loop = asyncio.get_running_loop()
        while True:
            await asyncio.sleep(self.core.timeout / 4)
            for p in self.core.due(loop.time()):
                await self._send(p)

    async def call(self, target: int, command: bytes, needed) -> object:
        """Submit a command and wait for replies from every needed partition."""
        loop = asyncio.get_running_loop()
        if self._retry_task is None:
            self._retry_task = asyncio.create_task(self._retry_loop())
        p = self.core.submit(target, command, needed, loop.time())
        fut = loop.create_future()
        self._futures[p.seq] = fut
        await self._send(p)
        return await fut

    async def close(self) -> None:
        if self._retry_task is not None:
            self._retry_task.cancel()
        for t in self._readers:
            t.cancel()
        for w in self.conns.values():
            w.close()
