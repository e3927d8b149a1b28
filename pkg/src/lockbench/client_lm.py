"""Client-centric lock manager.

Clients acquire and release locks by issuing one-sided verbs straight at
the lock-table region; the host runs no lock logic at all.  Exclusive
acquisition is a CAS of the whole word from 0 to (client_id | 0), retried
with identical parameters until it lands.  Shared acquisition is a single
FA(+1) that pre-registers the reader in the count, followed — if an
exclusive owner was present — by 4-byte READ-polling of the owner half
until it reads zero; the FA is never repeated.  Exclusive release WRITEs
four zero bytes over the owner half, leaving pre-registered reader counts
intact; shared release is FA(2^64-1), a modular decrement of the count.

There is no fairness here: readers that pre-increment while a writer
holds the lock keep CAS(0) failing after the writer leaves, so a steady
reader stream can starve writers.  That behavior is intentional and gets
measured rather than fixed.

A shared acquirer that exhausts its retry budget must undo its
pre-increment with FA(-1), otherwise the leaked count would block
writers forever; the rollback is recorded as a REL/TIMEOUT trace event so
the checker can confirm the count returned to balance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .errors import AcquisitionTimeout, ProtocolError, ReleaseError
from .locktable import HALF_SIZE, decode, encode, exclusive_half_offset
from .trace import (
    MODE_EXCLUSIVE,
    MODE_SHARED,
    OP_ACQ,
    OP_REL,
    OUT_ACK,
    OUT_GRANT,
    OUT_REQ,
    OUT_TIMEOUT,
    TraceRecorder,
)

U64_MINUS_ONE = (1 << 64) - 1
_ZERO_HALF = bytes(HALF_SIZE)


@dataclass(frozen=True, slots=True)
class HeldLock:
    item_id: int
    mode: str


class ClientSession:
    """One client's handle on the lock table.

    Strictly sequential: one in-flight verb, so the per-client trace is
    totally ordered.  `backoff` is the pause between retries for both the
    exclusive CAS loop and the shared READ poll; the default 0 still
    yields the scheduler between attempts so peers can make progress.
    `max_retries=None` retries forever (benchmark setting); a finite value
    bounds failed CAS attempts / READ polls before acquisition-timeout.
    """

    def __init__(
        self,
        qp,
        table,
        client_id: int,
        backoff: float = 0.0,
        max_retries: int | None = None,
        recorder: TraceRecorder | None = None,
    ):
        if client_id < 1:
            raise ValueError("client_id must be >= 1")
        if max_retries is not None and max_retries < 0:
            raise ValueError("max_retries must be >= 0 or None")
        self.qp = qp
        self.table = table
        self.client_id = client_id
        self.backoff = backoff
        self.max_retries = max_retries
        self._recorder = recorder
        self._held: dict[int, str] = {}

    # -- plumbing --------------------------------------------------------

    def _record(self, item_id: int, op: str, mode: str, outcome: str) -> None:
        if self._recorder is not None:
            self._recorder.record(self.client_id, self.client_id, item_id, op, mode, outcome)

    def _pause(self) -> None:
        # sleep(0) still releases the GIL, letting peer threads run between
        # zero-backoff retries instead of spinning out a full GIL slice.
        time.sleep(self.backoff if self.backoff > 0 else 0)

    def _verb_ok(self, completion, action: str):
        if not completion.ok:
            raise ProtocolError(f"{action} failed: {completion.status.name}")
        return completion

    def _check_not_held(self, item_id: int) -> None:
        if item_id in self._held:
            raise ProtocolError(
                f"client {self.client_id} already holds item {item_id} ({self._held[item_id]})"
            )

    def held_locks(self) -> dict[int, str]:
        return dict(self._held)

    # -- acquire ---------------------------------------------------------

    def acquire_exclusive(self, item_id: int) -> HeldLock:
        self._check_not_held(item_id)
        offset = self.table.word_offset(item_id)
        swap = encode(self.client_id, 0)
        self._record(item_id, OP_ACQ, MODE_EXCLUSIVE, OUT_REQ)
        failures = 0
        while True:
            completion = self._verb_ok(
                self.qp.post_cas(self.table.region_id, offset, 0, swap), "exclusive CAS"
            )
            if completion.value == 0:
                self._held[item_id] = MODE_EXCLUSIVE
                self._record(item_id, OP_ACQ, MODE_EXCLUSIVE, OUT_GRANT)
                return HeldLock(item_id, MODE_EXCLUSIVE)
            failures += 1
            if self.max_retries is not None and failures > self.max_retries:
                # The failed CASes never modified the word: nothing to undo.
                self._record(item_id, OP_ACQ, MODE_EXCLUSIVE, OUT_TIMEOUT)
                raise AcquisitionTimeout(
                    f"exclusive acquire of item {item_id} gave up after {failures} attempts"
                )
            self._pause()

    def acquire_shared(self, item_id: int) -> HeldLock:
        self._check_not_held(item_id)
        offset = self.table.word_offset(item_id)
        self._record(item_id, OP_ACQ, MODE_SHARED, OUT_REQ)
        completion = self._verb_ok(
            self.qp.post_fa(self.table.region_id, offset, 1), "shared FA"
        )
        owner, _ = decode(completion.value)
        if owner == 0:
            self._held[item_id] = MODE_SHARED
            self._record(item_id, OP_ACQ, MODE_SHARED, OUT_GRANT)
            return HeldLock(item_id, MODE_SHARED)
        owner_offset = exclusive_half_offset(offset)
        polls = 0
        while True:
            polls += 1
            if self.max_retries is not None and polls > self.max_retries:
                self._record(item_id, OP_ACQ, MODE_SHARED, OUT_TIMEOUT)
                self._rollback_shared(item_id, offset)
                raise AcquisitionTimeout(
                    f"shared acquire of item {item_id} gave up after {polls - 1} polls"
                )
            self._pause()
            read = self._verb_ok(
                self.qp.post_read(self.table.region_id, owner_offset, HALF_SIZE),
                "shared owner poll",
            )
            if read.value == 0:
                self._held[item_id] = MODE_SHARED
                self._record(item_id, OP_ACQ, MODE_SHARED, OUT_GRANT)
                return HeldLock(item_id, MODE_SHARED)

    def _rollback_shared(self, item_id: int, offset: int) -> None:
        completion = self._verb_ok(
            self.qp.post_fa(self.table.region_id, offset, U64_MINUS_ONE),
            "shared rollback FA",
        )
        _, count = decode(completion.value)
        if count < 1:
            raise ProtocolError(f"shared count underflow on item {item_id}")
        self._record(item_id, OP_REL, MODE_SHARED, OUT_TIMEOUT)

    # -- release ---------------------------------------------------------

    def release_exclusive(self, lock: HeldLock) -> None:
        if lock.mode != MODE_EXCLUSIVE or self._held.get(lock.item_id) != MODE_EXCLUSIVE:
            raise ProtocolError(
                f"client {self.client_id} does not hold item {lock.item_id} exclusively"
            )
        offset = exclusive_half_offset(self.table.word_offset(lock.item_id))
        self._record(lock.item_id, OP_REL, MODE_EXCLUSIVE, OUT_REQ)
        completion = self.qp.post_write(self.table.region_id, offset, _ZERO_HALF)
        if not completion.ok:
            raise ReleaseError(f"exclusive release WRITE failed: {completion.status.name}")
        del self._held[lock.item_id]
        self._record(lock.item_id, OP_REL, MODE_EXCLUSIVE, OUT_ACK)

    def release_shared(self, lock: HeldLock) -> None:
        if lock.mode != MODE_SHARED or self._held.get(lock.item_id) != MODE_SHARED:
            raise ProtocolError(
                f"client {self.client_id} does not hold item {lock.item_id} in shared mode"
            )
        offset = self.table.word_offset(lock.item_id)
        self._record(lock.item_id, OP_REL, MODE_SHARED, OUT_REQ)
        completion = self.qp.post_fa(self.table.region_id, offset, U64_MINUS_ONE)
        if not completion.ok:
            raise ReleaseError(f"shared release FA failed: {completion.status.name}")
        _, count = decode(completion.value)
        if count < 1:
            raise ProtocolError(f"shared count underflow on item {lock.item_id}")
        del self._held[lock.item_id]
        self._record(lock.item_id, OP_REL, MODE_SHARED, OUT_ACK)

    # -- uniform driver surface (same shape as the server-centric client) --

    def acquire(self, item_id: int, shared: bool) -> HeldLock:
        return self.acquire_shared(item_id) if shared else self.acquire_exclusive(item_id)

    def release(self, item_id: int) -> None:
        mode = self._held.get(item_id)
        if mode is None:
            raise ProtocolError(f"releasing item {item_id} that is not held")
        lock = HeldLock(item_id, mode)
        if mode == MODE_SHARED:
            self.release_shared(lock)
        else:
            self.release_exclusive(lock)

    def close(self) -> None:
        self.qp.close()
