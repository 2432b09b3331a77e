"""Message fabrics connecting coordinator roles and storing-nodes.

Two interchangeable implementations of one contract:

  * InProcessFabric — queue-and-thread delivery inside one process, with
    per-link fault controls (drop, delay, reorder) for exercising timeout
    and degraded paths deterministically.
  * SocketFabric — one TCP listener per node and one persistent connection
    per (sender, receiver) pair carrying length-prefixed protocol frames.

A node registers a name and a handler; `send` delivers an Envelope to the
named peer. Handlers run on the receiving node's delivery thread and must
not block the fabric for long.
"""

from __future__ import annotations

import queue
import random
import socket
import socketserver
import threading

from .protocol import DecodeError, Envelope, decode, encode, read_frame


class FabricError(Exception):
    pass


class UnknownNodeError(FabricError):
    pass


class InProcessFabric:
    """Lossless ordered delivery by default; per-link rules inject faults."""

    def __init__(self):
        self._nodes: dict[str, queue.Queue] = {}
        self._threads: dict[str, threading.Thread] = {}
        self._handlers: dict[str, object] = {}
        self._drop: dict[tuple[str, str], bool] = {}
        self._delay: dict[tuple[str, str], float] = {}
        self._reorder: dict[tuple[str, str], random.Random] = {}
        self._lock = threading.Lock()
        self._closed = False

    def register(self, name: str, handler) -> None:
        with self._lock:
            if name in self._nodes:
                raise FabricError(f"node {name!r} already registered")
            q: queue.Queue = queue.Queue()
            thread = threading.Thread(
                target=self._pump, args=(name, q, handler), daemon=True
            )
            self._nodes[name] = q
            self._handlers[name] = handler
            self._threads[name] = thread
        thread.start()

    def _pump(self, name: str, q: queue.Queue, handler) -> None:
        while True:
            env = q.get()
            if env is None:
                return
            handler(env)

    def send(self, dest: str, env: Envelope) -> None:
        # round-trip through the codec so both fabrics exercise the same
        # serialization path
        frame = encode(env)
        with self._lock:
            if self._closed:
                return
            if dest not in self._nodes:
                raise UnknownNodeError(f"unknown node {dest!r}")
            link = (env.sender, dest)
            if self._drop.get(link):
                return
            delay = self._delay.get(link, 0.0)
            rng = self._reorder.get(link)
            if rng is not None:
                delay += rng.uniform(0.0, 0.02)
            q = self._nodes[dest]
        decoded = decode(frame)
        if delay > 0:
            timer = threading.Timer(delay, q.put, args=(decoded,))
            timer.daemon = True
            timer.start()
        else:
            q.put(decoded)

    # -- fault controls ----------------------------------------------------

    def set_drop(self, sender: str, dest: str, dropping: bool = True) -> None:
        with self._lock:
            self._drop[(sender, dest)] = dropping

    def set_delay(self, sender: str, dest: str, seconds: float) -> None:
        with self._lock:
            self._delay[(sender, dest)] = seconds

    def set_reorder(self, sender: str, dest: str, seed: int = 0) -> None:
        with self._lock:
            self._reorder[(sender, dest)] = random.Random(seed)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            items = list(self._nodes.items())
        for _, q in items:
            q.put(None)
        for thread in self._threads.values():
            thread.join(timeout=5)


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        def read_exact(n: int) -> bytes:
            buf = b""
            while len(buf) < n:
                chunk = self.request.recv(n - len(buf))
                if not chunk:
                    raise ConnectionError("peer closed")
                buf += chunk
            return buf

        while True:
            try:
                frame = read_frame(read_exact)
            except (ConnectionError, OSError):
                return
            except DecodeError:
                return  # garbage framing: drop the connection, stay up
            try:
                env = decode(frame)
            except DecodeError:
                continue  # bad frame body: skip it, keep the stream
            self.server.fabric_handler(env)


class _NodeServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class SocketFabric:
    """TCP transport over a static name -> (host, port) topology."""

    def __init__(self, topology: dict[str, tuple[str, int]]):
        self.topology = dict(topology)
        self._servers: dict[str, _NodeServer] = {}
        self._server_threads: list[threading.Thread] = []
        self._conns: dict[tuple[str, str], socket.socket] = {}
        self._conn_lock = threading.Lock()

    def register(self, name: str, handler) -> None:
        if name not in self.topology:
            raise UnknownNodeError(f"{name!r} not in topology")
        host, port = self.topology[name]
        server = _NodeServer((host, port), _FrameHandler)
        server.fabric_handler = handler
        if port == 0:  # ephemeral port: record what the OS picked
            self.topology[name] = server.server_address[:2]
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        self._servers[name] = server
        self._server_threads.append(thread)
        thread.start()

    def send(self, dest: str, env: Envelope) -> None:
        if dest not in self.topology:
            raise UnknownNodeError(f"unknown node {dest!r}")
        frame = encode(env)
        key = (env.sender, dest)
        with self._conn_lock:
            conn = self._conns.get(key)
            if conn is None:
                try:
                    conn = socket.create_connection(self.topology[dest], timeout=5)
                except OSError as exc:
                    raise FabricError(f"cannot reach {dest!r}: {exc}") from exc
                self._conns[key] = conn
            try:
                conn.sendall(frame)
            except OSError as exc:
                self._conns.pop(key, None)
                try:
                    conn.close()
                except OSError:
                    pass
                raise FabricError(f"send to {dest!r} failed: {exc}") from exc

    def close(self) -> None:
        with self._conn_lock:
            for conn in self._conns.values():
                try:
                    conn.close()
                except OSError:
                    pass
            self._conns.clear()
        for server in self._servers.values():
            server.shutdown()
            server.server_close()
        for thread in self._server_threads:
            thread.join(timeout=5)

    def stop_node(self, name: str) -> None:
        """Kill one node's listener (fault injection for degraded tests)."""
        server = self._servers.pop(name, None)
        if server is not None:
            server.shutdown()
            server.server_close()
        with self._conn_lock:
            for key in [k for k in self._conns if k[1] == name]:
                try:
                    self._conns[key].close()
                except OSError:
                    pass
                del self._conns[key]
