"""Emulated RDMA verb layer.

Provides registered memory regions, queue pairs and completions, with
one-sided READ/WRITE/CAS/FA executed against region memory and two-sided
SEND/RECV between paired endpoints.  This module implements the in-process
transport (clients are threads in one process); the TCP-emulated transport
in `tcp_transport` exposes the same queue-pair surface.

All one-sided effects on a given 8-byte word are serialized by a per-word
lock, so any mix of CAS, FA, half-word WRITE and READ on one word is
linearizable.  Ordinary WRITEs that overlap a word participate in the same
per-word locking; without that, a 4-byte release WRITE could tear a
concurrent FA on the other half of the word.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

WORD_SIZE = 8
U64_MASK = 0xFFFFFFFFFFFFFFFF


class VerbKind(IntEnum):
    READ = 1
    WRITE = 2
    CAS = 3
    FA = 4
    SEND = 5
    RECV = 6


class CompletionStatus(IntEnum):
    OK = 0
    RECEIVER_NOT_READY = 1
    LOCAL_ACCESS_ERROR = 2
    TRUNCATED = 3
    BAD_REQUEST = 4


@dataclass(frozen=True)
class Completion:
    """Result of one posted verb.

    `payload` carries the old value (little-endian, 8 bytes) for atomics,
    the data snapshot for READ, and the message for RECV.  `serial` is the
    per-word serialization stamp for ops confined to a single 8-byte word;
    replaying completions in serial order reproduces the word's history.
    """

    op_kind: VerbKind
    status: CompletionStatus
    payload: bytes = b""
    serial: int | None = None

    @property
    def ok(self) -> bool:
        return self.status == CompletionStatus.OK

    @property
    def value(self) -> int:
        """Payload decoded as a little-endian unsigned integer."""
        return int.from_bytes(self.payload, "little")


class RegionAccessError(Exception):
    """Out-of-bounds or misaligned access to a registered region."""


class MemoryRegion:
    """A registered, zero-initialized byte region.

    8-byte atomics must target 8-byte-aligned offsets.  READ/WRITE may
    target any in-bounds (offset, length); they lock every overlapped word
    so multi-byte accesses are atomic with respect to word-level atomics.
    """

    def __init__(self, region_id: int, length: int):
        if length <= 0:
            raise ValueError("region length must be positive")
        self.region_id = region_id
        self.length = length
        self._buf = bytearray(length)
        n_words = (length + WORD_SIZE - 1) // WORD_SIZE
        self._word_locks = [threading.Lock() for _ in range(n_words)]
        self._word_serials = [0] * n_words

    def _check_bounds(self, offset: int, length: int) -> None:
        if offset < 0 or length < 1 or offset + length > self.length:
            raise RegionAccessError(
                f"access [{offset}, {offset + length}) outside region of {self.length} bytes"
            )

    def _check_word(self, offset: int) -> int:
        self._check_bounds(offset, WORD_SIZE)
        if offset % WORD_SIZE != 0:
            raise RegionAccessError(f"atomic offset {offset} not 8-byte aligned")
        return offset // WORD_SIZE

    def _stamp(self, word_index: int) -> int:
        self._word_serials[word_index] += 1
        return self._word_serials[word_index]

    def _word_span(self, offset: int, length: int) -> range:
        return range(offset // WORD_SIZE, (offset + length - 1) // WORD_SIZE + 1)

    def read(self, offset: int, length: int) -> tuple[bytes, int | None]:
        """Atomic snapshot of `length` bytes; returns (data, serial)."""
        self._check_bounds(offset, length)
        span = self._word_span(offset, length)
        locks = [self._word_locks[w] for w in span]
        for lock in locks:
            lock.acquire()
        try:
            data = bytes(self._buf[offset : offset + length])
            serial = self._stamp(span[0]) if len(span) == 1 else None
        finally:
            for lock in reversed(locks):
                lock.release()
        return data, serial

    def write(self, offset: int, payload: bytes) -> int | None:
        """Atomic store of `payload`; returns the serial for single-word writes."""
        self._check_bounds(offset, len(payload))
        span = self._word_span(offset, len(payload))
        locks = [self._word_locks[w] for w in span]
        for lock in locks:
            lock.acquire()
        try:
            self._buf[offset : offset + len(payload)] = payload
            serial = self._stamp(span[0]) if len(span) == 1 else None
        finally:
            for lock in reversed(locks):
                lock.release()
        return serial

    def compare_and_swap(self, offset: int, expected: int, swap: int) -> tuple[int, int]:
        """Atomic 8-byte CAS; returns (old value, serial). Old value is
        returned whether or not the swap took place."""
        w = self._check_word(offset)
        with self._word_locks[w]:
            old = int.from_bytes(self._buf[offset : offset + 8], "little")
            if old == expected:
                self._buf[offset : offset + 8] = (swap & U64_MASK).to_bytes(8, "little")
            return old, self._stamp(w)

    def fetch_and_add(self, offset: int, addend: int) -> tuple[int, int]:
        """Atomic 8-byte add modulo 2^64; returns (old value, serial)."""
        w = self._check_word(offset)
        with self._word_locks[w]:
            old = int.from_bytes(self._buf[offset : offset + 8], "little")
            new = (old + addend) & U64_MASK
            self._buf[offset : offset + 8] = new.to_bytes(8, "little")
            return old, self._stamp(w)

    def snapshot_word(self, item: int) -> int:
        """Read word `item` (for assertions and quiescence checks)."""
        data, _ = self.read(item * WORD_SIZE, WORD_SIZE)
        return int.from_bytes(data, "little")


def _old_value_completion(kind: VerbKind, old: int, serial: int | None) -> Completion:
    return Completion(kind, CompletionStatus.OK, old.to_bytes(8, "little"), serial)


def _access_error(kind: VerbKind) -> Completion:
    return Completion(kind, CompletionStatus.LOCAL_ACCESS_ERROR)


class QueuePair:
    """In-process queue pair.

    One-sided verbs execute directly against the fabric's region registry
    (the passive side runs no code, mirroring RNIC DMA).  Two-sided SEND
    targets the peer queue pair and requires a pre-posted RECEIVE there.
    A queue pair is owned by one actor: callers post at most one verb at a
    time, and only the owner polls receives.
    """

    def __init__(self, fabric: "InprocFabric", qp_id: int, client_id: int):
        self.fabric = fabric
        self.qp_id = qp_id
        self.client_id = client_id
        self.peer: QueuePair | None = None
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._recv_buffers: deque[int] = deque()
        self._inbox: deque[Completion] = deque()
        self._closed = False

    # -- one-sided -----------------------------------------------------

    def _delay(self) -> None:
        if self.fabric.latency > 0:
            time.sleep(self.fabric.latency)

    def _one_sided(self, kind: VerbKind, region_id: int, fn) -> Completion:
        self._delay()
        region = self.fabric.lookup_region(region_id)
        if region is None:
            completion = _access_error(kind)
        else:
            try:
                completion = fn(region)
            except RegionAccessError:
                completion = _access_error(kind)
        self._delay()
        return completion

    def post_read(self, region_id: int, offset: int, length: int) -> Completion:
        def run(region: MemoryRegion) -> Completion:
            data, serial = region.read(offset, length)
            return Completion(VerbKind.READ, CompletionStatus.OK, data, serial)

        return self._one_sided(VerbKind.READ, region_id, run)

    def post_write(self, region_id: int, offset: int, payload: bytes) -> Completion:
        def run(region: MemoryRegion) -> Completion:
            serial = region.write(offset, payload)
            return Completion(VerbKind.WRITE, CompletionStatus.OK, b"", serial)

        return self._one_sided(VerbKind.WRITE, region_id, run)

    def post_cas(self, region_id: int, offset: int, expected: int, swap: int) -> Completion:
        def run(region: MemoryRegion) -> Completion:
            old, serial = region.compare_and_swap(offset, expected, swap)
            return _old_value_completion(VerbKind.CAS, old, serial)

        return self._one_sided(VerbKind.CAS, region_id, run)

    def post_fa(self, region_id: int, offset: int, addend: int) -> Completion:
        def run(region: MemoryRegion) -> Completion:
            old, serial = region.fetch_and_add(offset, addend)
            return _old_value_completion(VerbKind.FA, old, serial)

        return self._one_sided(VerbKind.FA, region_id, run)

    # -- two-sided -----------------------------------------------------

    def post_recv(self, capacity: int) -> None:
        """Post a receive buffer; must happen before the matching SEND."""
        with self._lock:
            self._recv_buffers.append(capacity)

    def post_send(self, payload: bytes) -> Completion:
        self._delay()
        peer = self.peer
        if peer is None:
            return Completion(VerbKind.SEND, CompletionStatus.RECEIVER_NOT_READY)
        status = peer._deliver(payload)
        self._delay()
        return Completion(VerbKind.SEND, status)

    def _deliver(self, payload: bytes) -> CompletionStatus:
        with self._lock:
            if self._closed or not self._recv_buffers:
                return CompletionStatus.RECEIVER_NOT_READY
            capacity = self._recv_buffers.popleft()
            if capacity < len(payload):
                self._inbox.append(Completion(VerbKind.RECV, CompletionStatus.TRUNCATED))
                status = CompletionStatus.TRUNCATED
            else:
                self._inbox.append(Completion(VerbKind.RECV, CompletionStatus.OK, payload))
                status = CompletionStatus.OK
            self._ready.notify()
            return status

    def poll_recv(self, timeout: float | None = None) -> Completion | None:
        """Pop the next receive completion; None on timeout or close."""
        with self._lock:
            deadline = None if timeout is None else time.monotonic() + timeout
            while not self._inbox:
                if self._closed:
                    return None
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._ready.wait(remaining)
            return self._inbox.popleft()

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._ready.notify_all()
        peer = self.peer
        if peer is not None and not peer._closed:
            self.peer = None
            peer.close()


class SrListener:
    """Accept queue for server-side queue pairs created by client connects."""

    def __init__(self):
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._pending: deque[QueuePair] = deque()
        self._closed = False

    def _offer(self, qp: QueuePair) -> None:
        with self._lock:
            self._pending.append(qp)
            self._ready.notify()

    def accept(self, timeout: float | None = None) -> QueuePair | None:
        with self._lock:
            deadline = None if timeout is None else time.monotonic() + timeout
            while not self._pending:
                if self._closed:
                    return None
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._ready.wait(remaining)
            return self._pending.popleft()

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._ready.notify_all()


class InprocFabric:
    """In-process transport: a region registry plus queue-pair wiring.

    `latency` is the injected one-way delay applied to each verb leg
    (request and completion); the default 0 gives bare shared-memory cost.
    """

    def __init__(self, latency: float = 0.0):
        self.latency = latency
        self._lock = threading.Lock()
        self._regions: dict[int, MemoryRegion] = {}
        self._region_ids = itertools.count(1)
        self._qp_ids = itertools.count(1)
        self._client_ids = itertools.count(1)
        self._listener: SrListener | None = None

    def register_region(self, length: int) -> MemoryRegion:
        if length <= 0:
            raise ValueError("region length must be positive")
        with self._lock:
            region = MemoryRegion(next(self._region_ids), length)
            self._regions[region.region_id] = region
            return region

    def lookup_region(self, region_id: int) -> MemoryRegion | None:
        with self._lock:
            return self._regions.get(region_id)

    def sr_listen(self) -> SrListener:
        with self._lock:
            if self._listener is None:
                self._listener = SrListener()
            return self._listener

    def connect(self, client_id: int | None = None) -> QueuePair:
        """Create a client-side queue pair; dense client IDs are assigned
        starting at 1 when the caller does not supply one."""
        with self._lock:
            if client_id is None:
                client_id = next(self._client_ids)
            if client_id < 1:
                raise ValueError("client IDs start at 1")
            qp = QueuePair(self, next(self._qp_ids), client_id)
            listener = self._listener
            if listener is not None:
                server_qp = QueuePair(self, next(self._qp_ids), client_id)
                qp.peer = server_qp
                server_qp.peer = qp
        if listener is not None:
            listener._offer(qp.peer)
        return qp

    def close(self) -> None:
        with self._lock:
            listener = self._listener
        if listener is not None:
            listener.close()
