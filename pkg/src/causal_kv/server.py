"""Live TCP service: newline-delimited JSON frames on a single listen port.

Client requests ({"op": ...}) and peer replication messages ({"type": ...})
share the port; each frame is routed by which field it carries. Responses and
watch pushes for a connection are serialized through a per-connection outbound
queue drained by a sender thread, so watch fan-out never blocks the engine. A
watcher that falls more than 10,000 frames behind is disconnected with a
watch_overflow error.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
from collections import deque

from .engine import canonical_json_bytes
from .node import Node

logger = logging.getLogger(__name__)

WATCH_QUEUE_LIMIT = 10_000


def _encode_frame(obj) -> bytes:
    return canonical_json_bytes(obj) + b"\n"


class _Connection:
    def __init__(self, sock: socket.socket, server: "Server"):
        self.sock = sock
        self.server = server
        self.queue: deque = deque()
        self.ready = threading.Condition()
        self.closed = False
        self.watch_ids: set[int] = set()

    def enqueue(self, obj) -> None:
        with self.ready:
            if self.closed:
                return
            if len(self.queue) >= WATCH_QUEUE_LIMIT:
                self.queue.clear()
                self.queue.append(
                    {"id": 0, "ok": False, "error": {"code": "watch_overflow", "msg": "watcher too slow"}}
                )
                self.closed = True
            else:
                self.queue.append(obj)
            self.ready.notify()

    def sender_loop(self) -> None:
        while True:
            with self.ready:
                while not self.queue and not self.closed:
                    self.ready.wait(timeout=0.5)
                if not self.queue and self.closed:
                    break
                obj = self.queue.popleft() if self.queue else None
            if obj is None:
                continue
            try:
                self.sock.sendall(_encode_frame(obj))
            except OSError:
                break
        try:
            self.sock.close()
        except OSError:
            pass

    def close(self) -> None:
        with self.ready:
            self.closed = True
            self.ready.notify()


class Server:
    """Accept loop plus per-connection reader/sender threads for one node."""

    def __init__(self, node: Node, host: str = "127.0.0.1", port: int = 0):
        self.node = node
        self.sock = socket.create_server((host, port))
        self.address = self.sock.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conns: set[_Connection] = set()

    def start(self) -> "Server":
        thread = threading.Thread(target=self._accept_loop, daemon=True, name="accept")
        thread.start()
        self._threads.append(thread)
        return self

    def _accept_loop(self) -> None:
        self.sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                sock, _addr = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn = _Connection(sock, self)
            self._conns.add(conn)
            threading.Thread(target=conn.sender_loop, daemon=True).start()
            threading.Thread(target=self._reader_loop, args=(conn,), daemon=True).start()

    def _reader_loop(self, conn: _Connection) -> None:
        try:
            with conn.sock.makefile("rb") as reader:
                for line in reader:
                    if self._stop.is_set():
                        break
                    if not line.strip():
                        continue
                    try:
                        obj = json.loads(line)
                    except json.JSONDecodeError:
                        break  # unparseable frame: close the connection
                    self._route(conn, obj)
        except OSError:
            pass
        finally:
            for watch_id in conn.watch_ids:
                self.node.watches.cancel(watch_id)
            conn.close()
            self._conns.discard(conn)

    def _route(self, conn: _Connection, obj) -> None:
        if isinstance(obj, dict) and "type" in obj:
            reply = self.node.handle_peer_message(obj)
            if reply is not None:
                conn.enqueue(reply)
            return
        response = self.node.dispatch(obj, watch_sink=conn.enqueue)
        if isinstance(obj, dict) and obj.get("op") == "watch_create" and response.get("ok"):
            conn.watch_ids.add(response["watch_id"])
        conn.enqueue(response)

    def stop(self) -> None:
        self._stop.set()
        try:
            self.sock.close()
        except OSError:
            pass
        for conn in list(self._conns):
            conn.close()


class PeerClient:
    """Outbound peer links, re-established lazily; send failures are swallowed
    (the periodic sync repairs anything a lost message leaves behind)."""

    def __init__(self, node_ref: dict, addresses: dict[int, tuple[str, int]], timeout: float = 1.0):
        self._node_ref = node_ref  # {"node": Node}; filled in after Node construction
        self.addresses = addresses
        self.timeout = timeout
        self._socks: dict[int, socket.socket] = {}
        self._locks: dict[int, threading.Lock] = {pid: threading.Lock() for pid in addresses}

    def send(self, peer_id: int, msg: dict) -> bool:
        if peer_id not in self.addresses:
            return False
        with self._locks[peer_id]:
            try:
                sock = self._connect(peer_id)
                sock.sendall(_encode_frame(msg))
                return True
            except OSError as exc:
                logger.debug("peer %d unreachable: %s", peer_id, exc)
                self._drop(peer_id)
                return False

    def _connect(self, peer_id: int) -> socket.socket:
        sock = self._socks.get(peer_id)
        if sock is not None:
            return sock
        sock = socket.create_connection(self.addresses[peer_id], timeout=self.timeout)
        sock.settimeout(None)
        self._socks[peer_id] = sock
        threading.Thread(target=self._reply_loop, args=(peer_id, sock), daemon=True).start()
        return sock

    def _reply_loop(self, peer_id: int, sock: socket.socket) -> None:
        """Peers answer sync requests on the same connection we opened."""
        try:
            with sock.makefile("rb") as reader:
                for line in reader:
                    node = self._node_ref.get("node")
                    if node is None or not line.strip():
                        continue
                    try:
                        obj = json.loads(line)
                    except json.JSONDecodeError:
                        break
                    reply = node.handle_peer_message(obj)
                    if reply is not None:
                        with self._locks[peer_id]:
                            sock.sendall(_encode_frame(reply))
        except OSError:
            pass
        finally:
            self._drop(peer_id)

    def _drop(self, peer_id: int) -> None:
        sock = self._socks.pop(peer_id, None)
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def close(self) -> None:
        for peer_id in list(self._socks):
            self._drop(peer_id)


class SyncScheduler:
    """Background thread driving one anti-entropy round per peer per interval,
    staggered so peers are contacted one at a time, plus the lease-expiry tick."""

    def __init__(self, node: Node, interval_ms: int):
        if interval_ms < 10:
            raise ValueError("sync interval must be at least 10 ms")
        self.node = node
        self.interval = interval_ms / 1000.0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True, name="sync")

    def start(self) -> "SyncScheduler":
        self._thread.start()
        return self

    def _loop(self) -> None:
        peers = sorted(self.node.sync.peer_states)
        last_lease_scan = 0.0
        while not self._stop.is_set():
            if not peers:
                if self._stop.wait(self.interval):
                    break
                continue
            for peer_id in peers:
                if self._stop.is_set():
                    return
                self.node.sync_with(peer_id)
                if self._stop.wait(self.interval / len(peers)):
                    return
            now = self.node.clock()
            if now - last_lease_scan >= 1.0:
                self.node.lease_tick()
                last_lease_scan = now

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2.0)
