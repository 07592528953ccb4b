"""Frame transports: in-process loopback queues and local TCP sockets.

A transport hands out one server endpoint and one endpoint per client. The server
endpoint sends to a single client or to ``ALL``; client endpoints only talk to the
server. Every logical message is recorded in ``log`` as ``(kind, round, sender, dest)``
so tests can count traffic; a broadcast to all clients counts once.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
from typing import Iterable, Optional

from .wire import HEADER_SIZE, FrameError, parse_header

ALL = -1
_HELLO = struct.Struct("<I")


class TransportTimeout(TimeoutError):
    pass


class TransportClosed(ConnectionError):
    pass


def _describe(frame: bytes):
    _, kind, rnd, sender, _ = parse_header(frame)
    return kind, rnd, sender


class _Log:
    def __init__(self):
        self.entries: list[tuple] = []
        self._lock = threading.Lock()

    def record(self, frame: bytes, dest: int):
        kind, rnd, sender = _describe(frame)
        with self._lock:
            self.entries.append((kind, rnd, sender, dest))


def _get(q: "queue.Queue[bytes]", timeout: Optional[float], who: str) -> bytes:
    try:
        item = q.get(timeout=timeout)
    except queue.Empty:
        raise TransportTimeout(f"{who}: nothing received within {timeout}s") from None
    if item is None:
        raise TransportClosed(f"{who}: connection closed")
    return item


# ---------------------------------------------------------------- loopback

class LoopbackTransport:
    """Queues in one process; frames are still fully serialised bytes."""

    def __init__(self, client_ids: Iterable[int]):
        self.client_ids = sorted(client_ids)
        self._server_q: "queue.Queue[bytes]" = queue.Queue()
        self._client_q = {k: queue.Queue() for k in self.client_ids}
        self._log = _Log()

    @property
    def log(self) -> list[tuple]:
        return self._log.entries

    def server(self) -> "_LoopbackServer":
        return _LoopbackServer(self)

    def client(self, client_id: int) -> "_LoopbackClient":
        if client_id not in self._client_q:
            raise KeyError(f"unknown client {client_id}")
        return _LoopbackClient(self, client_id)


class _LoopbackServer:
    def __init__(self, hub: LoopbackTransport):
        self.hub = hub

    def send(self, frame: bytes, dest: int) -> None:
        self.hub._log.record(frame, dest)
        targets = self.hub.client_ids if dest == ALL else [dest]
        for k in targets:
            self.hub._client_q[k].put(frame)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        return _get(self.hub._server_q, timeout, "server")

    def close(self) -> None:
        pass


class _LoopbackClient:
    def __init__(self, hub: LoopbackTransport, client_id: int):
        self.hub = hub
        self.client_id = client_id

    def send(self, frame: bytes) -> None:
        self.hub._log.record(frame, -2)
        self.hub._server_q.put(frame)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        return _get(self.hub._client_q[self.client_id], timeout, f"client {self.client_id}")

    def close(self) -> None:
        pass


# ---------------------------------------------------------------- sockets

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise TransportClosed(f"peer closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, HEADER_SIZE)
    _, _, _, _, plen = parse_header(head)
    return head + _recv_exact(sock, plen)


class SocketServer:
    """Listening endpoint on localhost; one reader thread per connected client."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self._conns: dict[int, socket.socket] = {}
        self._inbox: "queue.Queue[Optional[bytes]]" = queue.Queue()
        self._log = _Log()
        self._threads: list[threading.Thread] = []

    @property
    def log(self) -> list[tuple]:
        return self._log.entries

    def accept(self, client_ids: Iterable[int], timeout: Optional[float] = None) -> None:
        expected = set(client_ids)
        self._listener.settimeout(timeout)
        while expected - set(self._conns):
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                missing = sorted(expected - set(self._conns))
                raise TransportTimeout(f"clients {missing} did not connect within {timeout}s") from None
            conn.settimeout(None)
            (cid,) = _HELLO.unpack(_recv_exact(conn, _HELLO.size))
            if cid not in expected or cid in self._conns:
                conn.close()
                raise FrameError(f"unexpected client id {cid} in handshake", 0)
            self._conns[cid] = conn
            th = threading.Thread(target=self._reader, args=(conn,), daemon=True)
            th.start()
            self._threads.append(th)

    def _reader(self, conn: socket.socket) -> None:
        try:
            while True:
                self._inbox.put(read_frame(conn))
        except (OSError, TransportClosed, FrameError):
            self._inbox.put(None)

    def send(self, frame: bytes, dest: int) -> None:
        self._log.record(frame, dest)
        targets = sorted(self._conns) if dest == ALL else [dest]
        for k in targets:
            self._conns[k].sendall(frame)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        return _get(self._inbox, timeout, "server")

    def close(self) -> None:
        for conn in self._conns.values():
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._listener.close()


class SocketClient:
    def __init__(self, address, client_id: int, timeout: Optional[float] = 30.0):
        self.client_id = client_id
        self._sock = socket.create_connection(tuple(address), timeout=timeout)
        self._sock.settimeout(None)
        self._sock.sendall(_HELLO.pack(client_id))

    def send(self, frame: bytes) -> None:
        self._sock.sendall(frame)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        self._sock.settimeout(timeout)
        try:
            return read_frame(self._sock)
        except socket.timeout:
            raise TransportTimeout(f"client {self.client_id}: nothing received within {timeout}s") from None

    def close(self) -> None:
        self._sock.close()
