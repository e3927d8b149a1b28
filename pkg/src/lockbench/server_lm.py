"""Server-centric lock manager.

A central server keeps one FIFO queue per item, each guarded by its own
mutex, and spawns one handler thread per client connection.  Lock and
release messages are 17-byte records; the server grants the queue head
when compatible, batching consecutive SHARED requests.  Admission is
strict FIFO: a SHARED request arriving behind a queued EXCLUSIVE request
waits even while other SHARED holders are active, which keeps writers
from starving.

Two frontends carry the same protocol: a socket-style frontend (real TCP,
or an in-process channel emulating it) and a SEND/RECV verb frontend.
Each charges a configurable amount of busy CPU per inbound message on a
bounded worker pool, emulating the kernel messaging overhead that
dominates a socket-based server; the verb frontend's default charge is
one tenth of the socket frontend's.
"""

from __future__ import annotations

import itertools
import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import ProtocolError
from .framing import recv_frame, send_frame
from .trace import (
    MODE_EXCLUSIVE,
    MODE_SHARED,
    OP_ACQ,
    OP_REL,
    OUT_ACK,
    OUT_GRANT,
    OUT_REQ,
    TraceRecorder,
)
from .verbs import CompletionStatus, QueuePair, SrListener

MESSAGE = struct.Struct("<BIIQ")  # op, client_id, item_id, request_id
MESSAGE_SIZE = MESSAGE.size

MSG_ACQ_SHARED = 1
MSG_ACQ_EXCL = 2
MSG_RELEASE = 3
MSG_GRANT = 4
MSG_ACK = 5
MSG_ERROR = 6

FRONTEND_TCP = "tcp"
FRONTEND_SEND_RECV = "send-recv"

# Default busy-CPU charge per inbound message, per frontend.  The verb
# frontend offloads kernel work to the emulated NIC, so it charges 10x less.
DEFAULT_TCP_MESSAGE_COST = 20e-6
DEFAULT_SR_MESSAGE_COST = 2e-6


def pack_message(op: int, client_id: int, item_id: int, request_id: int) -> bytes:
    return MESSAGE.pack(op, client_id, item_id, request_id)


def unpack_message(data: bytes) -> tuple[int, int, int, int]:
    return MESSAGE.unpack(data)


ACQUIRE = "ACQUIRE"
RELEASE = "RELEASE"


@dataclass(frozen=True, slots=True)
class LockRequest:
    request_id: int
    client_id: int
    item_id: int
    mode: str
    op: str = ACQUIRE


@dataclass(slots=True)
class ItemQueue:
    item_id: int
    mutex: threading.Lock = field(default_factory=threading.Lock)
    pending: deque = field(default_factory=deque)
    granted: dict = field(default_factory=dict)  # client_id -> mode


def grant_scan(item_queue: ItemQueue) -> list[LockRequest]:
    """Pop and grant every request admissible right now (mutex held).

    The head EXCLUSIVE request is granted only on an empty grant set; a
    head SHARED request pulls in the maximal run of consecutive SHARED
    requests behind it.  Anything behind an incompatible head waits.
    """
    newly: list[LockRequest] = []
    pending = item_queue.pending
    granted = item_queue.granted
    if not pending:
        return newly
    if MODE_EXCLUSIVE in granted.values():
        return newly
    if pending[0].mode == MODE_EXCLUSIVE:
        if not granted:
            head = pending.popleft()
            granted[head.client_id] = MODE_EXCLUSIVE
            newly.append(head)
        return newly
    while pending and pending[0].mode == MODE_SHARED:
        req = pending.popleft()
        granted[req.client_id] = MODE_SHARED
        newly.append(req)
    return newly


class LockServerCore:
    """Frontend-independent lock state: item queues, grants, validation."""

    def __init__(self, n_items: int, recorder: TraceRecorder | None = None):
        if n_items < 1:
            raise ValueError("need at least one item")
        self.n_items = n_items
        self._items = [ItemQueue(i) for i in range(n_items)]
        self._recorder = recorder

    def acquire(
        self, client_id: int, item_id: int, shared: bool, request_id: int
    ) -> tuple[str | None, list[LockRequest]]:
        """Enqueue an acquire; returns (error, newly granted requests)."""
        if not 0 <= item_id < self.n_items:
            return f"unknown item {item_id}", []
        mode = MODE_SHARED if shared else MODE_EXCLUSIVE
        item = self._items[item_id]
        with item.mutex:
            if client_id in item.granted or any(
                r.client_id == client_id for r in item.pending
            ):
                return f"client {client_id} already acquired item {item_id}", []
            item.pending.append(LockRequest(request_id, client_id, item_id, mode))
            if self._recorder is not None:
                self._recorder.record(0, client_id, item_id, OP_ACQ, mode, OUT_REQ)
            return None, grant_scan(item)

    def release(self, client_id: int, item_id: int) -> tuple[str | None, list[LockRequest]]:
        """Drop a grant; returns (error, follow-on grants)."""
        if not 0 <= item_id < self.n_items:
            return f"unknown item {item_id}", []
        item = self._items[item_id]
        with item.mutex:
            if client_id not in item.granted:
                return f"client {client_id} does not hold item {item_id}", []
            del item.granted[client_id]
            return None, grant_scan(item)

    def pending_count(self) -> int:
        total = 0
        for item in self._items:
            with item.mutex:
                total += len(item.pending)
        return total

    def granted_count(self) -> int:
        total = 0
        for item in self._items:
            with item.mutex:
                total += len(item.granted)
        return total


def upper_bound_throughput(
    cores: float, frequency: float, cycles_per_message: float, messages_per_lock: float
) -> float:
    """Loose upper bound on a message-bound server's lock throughput.

    cores * frequency / (cycles_per_message * messages_per_lock), in locks
    per second.  For 40 cores at 3 GHz and 10^4 cycles per message with one
    message per lock this is exactly 1.2e7; the round figure of "roughly
    30M locks per second" sometimes quoted for that configuration does not
    follow from the formula, which is what this function returns.
    """
    for name, value in (
        ("cores", cores),
        ("frequency", frequency),
        ("cycles_per_message", cycles_per_message),
        ("messages_per_lock", messages_per_lock),
    ):
        if value <= 0:
            raise ValueError(f"{name} must be positive, got {value}")
    return cores * frequency / (cycles_per_message * messages_per_lock)


@dataclass
class ServerConfig:
    n_items: int
    frontend: str = FRONTEND_TCP
    per_message_cost: float = 0.0
    worker_limit: int = 4

    def __post_init__(self):
        if self.frontend not in (FRONTEND_TCP, FRONTEND_SEND_RECV):
            raise ValueError(f"unknown frontend {self.frontend!r}")
        if self.per_message_cost < 0:
            raise ValueError("per_message_cost must be >= 0")
        if self.worker_limit < 1:
            raise ValueError("worker_limit must be >= 1")


class MessageCostModel:
    """Burns `cost` seconds of CPU per message on at most `worker_limit`
    concurrent workers (a semaphore emulating a bounded core budget)."""

    def __init__(self, cost: float, worker_limit: int):
        self._cost_ns = int(cost * 1e9)
        self._slots = threading.Semaphore(worker_limit)

    def charge(self) -> None:
        if self._cost_ns <= 0:
            return
        with self._slots:
            end = time.perf_counter_ns() + self._cost_ns
            while time.perf_counter_ns() < end:
                pass


# ---------------------------------------------------------------------------
# Connection plumbing.  Every endpoint speaks 17-byte messages; the server
# binds client_id -> endpoint on first contact so grants can be pushed to
# waiting clients from whichever handler thread frees them.


class InprocChannel:
    """In-process stand-in for one client's TCP connection."""

    def __init__(self):
        self._to_server: queue.SimpleQueue = queue.SimpleQueue()
        self._to_client: queue.SimpleQueue = queue.SimpleQueue()

    # client side
    def rpc(self, message: bytes) -> bytes:
        self._to_server.put(message)
        reply = self._to_client.get()
        if reply is None:
            raise ConnectionError("server closed the channel")
        return reply

    def close(self) -> None:
        self._to_server.put(None)

    # server side
    def recv_request(self) -> bytes | None:
        return self._to_server.get()

    def send_reply(self, message: bytes) -> None:
        self._to_client.put(message)

    def close_server_side(self) -> None:
        self._to_client.put(None)


class SocketConn:
    """Client side of the TCP frontend: length-prefixed frames on one
    long-lived connection."""

    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port))
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def rpc(self, message: bytes) -> bytes:
        send_frame(self._sock, message)
        reply = recv_frame(self._sock)
        if reply is None:
            raise ConnectionError("server closed the connection")
        return reply

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class _SocketEndpoint:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._send_lock = threading.Lock()

    def recv_request(self) -> bytes | None:
        return recv_frame(self._sock)

    def send_reply(self, message: bytes) -> None:
        with self._send_lock:
            try:
                send_frame(self._sock, message)
            except OSError:
                pass

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class QpConn:
    """Client side of the SEND/RECV frontend over any queue pair.

    A receive is posted before every request so the reply (or a deferred
    grant) always finds a buffer.  A SEND that races ahead of the server's
    accept loop comes back receiver-not-ready and is simply re-posted.
    """

    RETRY_PAUSE = 0.0005

    def __init__(self, qp, timeout: float = 30.0):
        self._qp = qp
        self._timeout = timeout

    def rpc(self, message: bytes) -> bytes:
        self._qp.post_recv(MESSAGE_SIZE)
        deadline = time.monotonic() + self._timeout
        while True:
            completion = self._qp.post_send(message)
            if completion.status == CompletionStatus.OK:
                break
            if completion.status != CompletionStatus.RECEIVER_NOT_READY:
                raise ConnectionError(f"send failed: {completion.status.name}")
            if time.monotonic() > deadline:
                raise ConnectionError("server never posted a receive")
            time.sleep(self.RETRY_PAUSE)
        reply = self._qp.poll_recv(self._timeout)
        if reply is None or reply.status != CompletionStatus.OK:
            raise ConnectionError("no reply from server")
        return reply.payload

    def close(self) -> None:
        self._qp.close()


class _QpEndpoint:
    """Server side of one SEND/RECV connection; keeps receives pre-posted."""

    PIPELINE = 2

    def __init__(self, qp: QueuePair):
        self._qp = qp
        for _ in range(self.PIPELINE):
            self._qp.post_recv(MESSAGE_SIZE)

    def recv_request(self) -> bytes | None:
        completion = self._qp.poll_recv()
        if completion is None:
            return None
        self._qp.post_recv(MESSAGE_SIZE)
        if completion.status != CompletionStatus.OK:
            return None
        return completion.payload

    def send_reply(self, message: bytes) -> None:
        # Every awaited reply has a pre-posted receive (clients post before
        # sending), so a failed send means the client is gone — not that it
        # is still waiting.  Dropping it keeps this handler alive to push
        # follow-on grants to other clients.
        self._qp.post_send(message)

    def close(self) -> None:
        self._qp.close()


class LockServer:
    """Thread-per-connection server wiring a frontend to LockServerCore."""

    def __init__(self, config: ServerConfig, recorder: TraceRecorder | None = None):
        self.config = config
        self.core = LockServerCore(config.n_items, recorder)
        self.cost = MessageCostModel(config.per_message_cost, config.worker_limit)
        self._endpoints: dict[int, object] = {}
        self._endpoint_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._listeners: list[object] = []
        self._tcp_socket: socket.socket | None = None
        self._closing = False

    # -- frontend attachment -------------------------------------------

    def attach_channel(self, channel: InprocChannel) -> None:
        self._spawn_handler(channel)

    def serve_sr_listener(self, listener: SrListener) -> None:
        self._listeners.append(listener)

        def accept_loop():
            while True:
                qp = listener.accept()
                if qp is None:
                    return
                self._spawn_handler(_QpEndpoint(qp))

        self._spawn(accept_loop, "sr-accept")

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(128)
        self._tcp_socket = sock
        bound = sock.getsockname()

        def accept_loop():
            while True:
                try:
                    conn, _ = sock.accept()
                except OSError:
                    return
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._spawn_handler(_SocketEndpoint(conn))

        self._spawn(accept_loop, "tcp-accept")
        return bound

    # -- request handling ------------------------------------------------

    def _spawn(self, target, name: str) -> None:
        thread = threading.Thread(target=target, name=f"lockserver-{name}", daemon=True)
        thread.start()
        self._threads.append(thread)

    def _spawn_handler(self, endpoint) -> None:
        self._spawn(lambda: self._handle(endpoint), "handler")

    def _bind(self, client_id: int, endpoint) -> None:
        with self._endpoint_lock:
            self._endpoints[client_id] = endpoint

    def _reply_to(self, client_id: int, message: bytes) -> None:
        with self._endpoint_lock:
            endpoint = self._endpoints.get(client_id)
        if endpoint is None:
            raise RuntimeError(f"no endpoint bound for client {client_id}")
        endpoint.send_reply(message)

    def _handle(self, endpoint) -> None:
        while True:
            data = endpoint.recv_request()
            if data is None or self._closing:
                if isinstance(endpoint, InprocChannel):
                    endpoint.close_server_side()
                return
            self.cost.charge()
            try:
                op, client_id, item_id, request_id = unpack_message(data)
            except struct.error:
                continue
            self._bind(client_id, endpoint)
            if op in (MSG_ACQ_SHARED, MSG_ACQ_EXCL):
                error, grants = self.core.acquire(
                    client_id, item_id, op == MSG_ACQ_SHARED, request_id
                )
                if error is not None:
                    endpoint.send_reply(pack_message(MSG_ERROR, client_id, item_id, request_id))
                    continue
                for grant in grants:
                    self._reply_to(
                        grant.client_id,
                        pack_message(MSG_GRANT, grant.client_id, grant.item_id, grant.request_id),
                    )
            elif op == MSG_RELEASE:
                error, grants = self.core.release(client_id, item_id)
                if error is not None:
                    endpoint.send_reply(pack_message(MSG_ERROR, client_id, item_id, request_id))
                    continue
                endpoint.send_reply(pack_message(MSG_ACK, client_id, item_id, request_id))
                for grant in grants:
                    self._reply_to(
                        grant.client_id,
                        pack_message(MSG_GRANT, grant.client_id, grant.item_id, grant.request_id),
                    )
            else:
                endpoint.send_reply(pack_message(MSG_ERROR, client_id, item_id, request_id))

    def shutdown(self) -> None:
        self._closing = True
        for listener in self._listeners:
            listener.close()
        if self._tcp_socket is not None:
            try:
                self._tcp_socket.close()
            except OSError:
                pass
        with self._endpoint_lock:
            endpoints = list(self._endpoints.values())
        for endpoint in endpoints:
            close = getattr(endpoint, "close", None)
            if close is not None:
                try:
                    close()
                except Exception:
                    pass


class ServerLockClient:
    """Client-side driver for the server-centric protocol.

    Closed loop: one outstanding request, so the next message received is
    always the reply (GRANT, ACK or ERROR) for the last request sent.
    """

    def __init__(self, conn, client_id: int, recorder: TraceRecorder | None = None):
        self.conn = conn
        self.client_id = client_id
        self._recorder = recorder
        self._request_ids = itertools.count(1)
        self._held: dict[int, str] = {}

    def _record(self, item_id: int, op: str, mode: str, outcome: str) -> None:
        if self._recorder is not None:
            self._recorder.record(self.client_id, self.client_id, item_id, op, mode, outcome)

    def acquire(self, item_id: int, shared: bool) -> None:
        request_id = next(self._request_ids)
        op = MSG_ACQ_SHARED if shared else MSG_ACQ_EXCL
        reply = self.conn.rpc(pack_message(op, self.client_id, item_id, request_id))
        rop, _, ritem, rrid = unpack_message(reply)
        if rop == MSG_ERROR:
            raise ProtocolError(f"acquire rejected for item {item_id}")
        if rop != MSG_GRANT or ritem != item_id or rrid != request_id:
            raise ProtocolError(f"unexpected reply op={rop} item={ritem}")
        mode = MODE_SHARED if shared else MODE_EXCLUSIVE
        self._held[item_id] = mode
        self._record(item_id, OP_ACQ, mode, OUT_GRANT)

    def release(self, item_id: int) -> None:
        mode = self._held.get(item_id)
        if mode is None:
            raise ProtocolError(f"releasing item {item_id} that is not held")
        request_id = next(self._request_ids)
        self._record(item_id, OP_REL, mode, OUT_REQ)
        reply = self.conn.rpc(pack_message(MSG_RELEASE, self.client_id, item_id, request_id))
        rop, _, ritem, rrid = unpack_message(reply)
        if rop == MSG_ERROR:
            raise ProtocolError(f"release rejected for item {item_id}")
        if rop != MSG_ACK or ritem != item_id or rrid != request_id:
            raise ProtocolError(f"unexpected reply op={rop} item={ritem}")
        del self._held[item_id]
        self._record(item_id, OP_REL, mode, OUT_ACK)

    def close(self) -> None:
        self.conn.close()
