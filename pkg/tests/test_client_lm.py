"""Client-centric protocol: CAS loop, FA pre-registration, half-word release."""

import threading

import pytest

from lockbench.client_lm import ClientSession, HeldLock
from lockbench.errors import AcquisitionTimeout, ProtocolError
from lockbench.locktable import LockTable, encode, exclusive_half_offset
from lockbench.trace import (
    MODE_EXCLUSIVE,
    MODE_SHARED,
    OUT_GRANT,
    OUT_TIMEOUT,
    TraceRecorder,
)
from lockbench.verbs import InprocFabric, VerbKind


class CountingQp:
    """Delegating wrapper that tallies posted verbs by kind."""

    def __init__(self, qp):
        self._qp = qp
        self.counts = {kind: 0 for kind in VerbKind}

    def _posted(self, kind, completion):
        self.counts[kind] += 1
        return completion

    def post_read(self, *a):
        return self._posted(VerbKind.READ, self._qp.post_read(*a))

    def post_write(self, *a):
        return self._posted(VerbKind.WRITE, self._qp.post_write(*a))

    def post_cas(self, *a):
        return self._posted(VerbKind.CAS, self._qp.post_cas(*a))

    def post_fa(self, *a):
        return self._posted(VerbKind.FA, self._qp.post_fa(*a))

    def close(self):
        self._qp.close()


@pytest.fixture
def fabric():
    f = InprocFabric()
    yield f
    f.close()


@pytest.fixture
def table(fabric):
    return LockTable.allocate(fabric, 4)


def make_session(fabric, table, client_id, **kwargs):
    qp = CountingQp(fabric.connect(client_id))
    return ClientSession(qp, table, client_id, **kwargs)


def set_word(table, item, word):
    table.region.write(table.word_offset(item), word.to_bytes(8, "little"))


# -- exclusive acquire --------------------------------------------------------


def test_exclusive_uncontended_first_cas_wins(fabric, table):
    s = make_session(fabric, table, 3)
    lock = s.acquire_exclusive(0)
    assert lock == HeldLock(0, MODE_EXCLUSIVE)
    assert table.region.snapshot_word(0) == encode(3, 0)
    assert s.qp.counts[VerbKind.CAS] == 1


def test_exclusive_succeeds_after_owner_departs(fabric, table):
    set_word(table, 0, encode(7, 0))
    s = make_session(fabric, table, 3, backoff=0.001)

    def depart():
        # Owner 7 releases: zero its half, leaving the count alone.
        table.region.write(exclusive_half_offset(0), bytes(4))

    t = threading.Timer(0.02, depart)
    t.start()
    try:
        s.acquire_exclusive(0)
    finally:
        t.join()
    assert table.region.snapshot_word(0) == encode(3, 0)
    assert s.qp.counts[VerbKind.CAS] >= 2  # at least one failed attempt


def test_exclusive_blocked_by_shared_count(fabric, table):
    # Two pre-registered readers: CAS(expected=0) keeps failing and leaves
    # the word untouched each time.
    set_word(table, 0, encode(0, 2))
    s = make_session(fabric, table, 3, max_retries=5)
    with pytest.raises(AcquisitionTimeout):
        s.acquire_exclusive(0)
    assert table.region.snapshot_word(0) == encode(0, 2)
    assert s.held_locks() == {}


def test_exclusive_timeout_records_trace_marker(fabric, table):
    set_word(table, 0, encode(9, 0))
    rec = TraceRecorder()
    s = ClientSession(fabric.connect(3), table, 3, max_retries=2, recorder=rec)
    with pytest.raises(AcquisitionTimeout):
        s.acquire_exclusive(0)
    outcomes = [(e.op, e.outcome) for e in rec.sorted_events()]
    assert ("ACQ", OUT_TIMEOUT) in outcomes
    assert ("ACQ", OUT_GRANT) not in outcomes


def test_exclusive_retry_budget_counts_failures(fabric, table):
    set_word(table, 0, encode(9, 0))
    s = make_session(fabric, table, 3, max_retries=4)
    with pytest.raises(AcquisitionTimeout):
        s.acquire_exclusive(0)
    assert s.qp.counts[VerbKind.CAS] == 5  # initial attempt + 4 retries


# -- shared acquire -----------------------------------------------------------


def test_shared_uncontended_single_fa(fabric, table):
    s = make_session(fabric, table, 2)
    lock = s.acquire_shared(1)
    assert lock == HeldLock(1, MODE_SHARED)
    assert table.region.snapshot_word(1) == encode(0, 1)
    assert s.qp.counts[VerbKind.FA] == 1
    assert s.qp.counts[VerbKind.READ] == 0


def test_shared_coexists_with_other_readers(fabric, table):
    set_word(table, 1, encode(0, 3))
    s = make_session(fabric, table, 2)
    s.acquire_shared(1)
    assert table.region.snapshot_word(1) == encode(0, 4)


def test_shared_polls_owner_half_never_second_fa(fabric, table):
    set_word(table, 1, encode(9, 0))
    s = make_session(fabric, table, 2, backoff=0.001)

    def owner_releases():
        table.region.write(exclusive_half_offset(8), bytes(4))

    t = threading.Timer(0.02, owner_releases)
    t.start()
    try:
        s.acquire_shared(1)
    finally:
        t.join()
    assert table.region.snapshot_word(1) == encode(0, 1)
    assert s.qp.counts[VerbKind.FA] == 1  # pre-registration happens exactly once
    assert s.qp.counts[VerbKind.READ] >= 1


def test_shared_timeout_rolls_back_the_increment(fabric, table):
    set_word(table, 2, encode(6, 1))
    rec = TraceRecorder()
    s = ClientSession(fabric.connect(4), table, 4, max_retries=3, recorder=rec)
    with pytest.raises(AcquisitionTimeout):
        s.acquire_shared(2)
    # encode(6,1) -> FA(+1) -> encode(6,2) -> rollback -> encode(6,1).
    assert table.region.snapshot_word(2) == encode(6, 1)
    outcomes = [(e.op, e.outcome) for e in rec.sorted_events()]
    assert ("ACQ", OUT_TIMEOUT) in outcomes
    assert ("REL", OUT_TIMEOUT) in outcomes  # the rollback marker


def test_duplicate_acquire_raises_before_any_verb(fabric, table):
    s = make_session(fabric, table, 2)
    s.acquire_shared(0)
    posted = dict(s.qp.counts)
    with pytest.raises(ProtocolError):
        s.acquire_exclusive(0)
    assert s.qp.counts == posted


# -- release ------------------------------------------------------------------


def test_exclusive_release_zeroes_owner_half_only(fabric, table):
    s = make_session(fabric, table, 5)
    s.acquire_exclusive(0)
    # Five shared waiters pre-increment while the writer holds the lock.
    for _ in range(5):
        table.region.fetch_and_add(0, 1)
    s.release_exclusive(HeldLock(0, MODE_EXCLUSIVE))
    assert table.region.snapshot_word(0) == encode(0, 5)


def test_exclusive_release_of_clean_word_leaves_zero(fabric, table):
    s = make_session(fabric, table, 5)
    s.acquire_exclusive(3)
    s.release(3)
    assert table.region.snapshot_word(3) == 0
    assert s.held_locks() == {}


def test_shared_release_decrements_count(fabric, table):
    set_word(table, 1, encode(0, 3))
    s = make_session(fabric, table, 2)
    s.acquire_shared(1)  # -> count 4
    s.release_shared(HeldLock(1, MODE_SHARED))
    assert table.region.snapshot_word(1) == encode(0, 3)


def test_last_shared_release_returns_word_to_zero(fabric, table):
    s = make_session(fabric, table, 2)
    s.acquire_shared(1)
    s.release(1)
    assert table.region.snapshot_word(1) == 0


def test_release_without_hold_raises_before_any_verb(fabric, table):
    s = make_session(fabric, table, 2)
    with pytest.raises(ProtocolError):
        s.release(0)
    with pytest.raises(ProtocolError):
        s.release_exclusive(HeldLock(0, MODE_EXCLUSIVE))
    with pytest.raises(ProtocolError):
        s.release_shared(HeldLock(0, MODE_SHARED))
    assert all(count == 0 for count in s.qp.counts.values())


def test_release_in_wrong_mode_raises(fabric, table):
    s = make_session(fabric, table, 2)
    s.acquire_shared(0)
    with pytest.raises(ProtocolError):
        s.release_exclusive(HeldLock(0, MODE_EXCLUSIVE))


def test_shared_count_underflow_is_a_protocol_error(fabric, table):
    s = make_session(fabric, table, 2)
    s.acquire_shared(1)
    # Something else (a buggy peer) steals the count out from under us.
    table.region.fetch_and_add(8, (1 << 64) - 1)
    with pytest.raises(ProtocolError):
        s.release_shared(HeldLock(1, MODE_SHARED))


# -- interleavings and accounting --------------------------------------------


def test_writers_and_readers_quiesce_to_zero_words(fabric, table):
    n_clients, per_client = 6, 40
    sessions = [make_session(fabric, table, i) for i in range(1, n_clients + 1)]
    barrier = threading.Barrier(n_clients)
    failures = []

    def work(s):
        try:
            barrier.wait()
            for k in range(per_client):
                item = k % 4
                if (k + s.client_id) % 3 == 0:
                    s.acquire_exclusive(item)
                else:
                    s.acquire_shared(item)
                s.release(item)
        except Exception as exc:  # pragma: no cover - failure reporting
            failures.append(exc)

    threads = [threading.Thread(target=work, args=(s,)) for s in sessions]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not failures
    assert table.words() == [0, 0, 0, 0]


def test_session_validates_construction(fabric, table):
    with pytest.raises(ValueError):
        ClientSession(fabric.connect(1), table, 0)
    with pytest.raises(ValueError):
        ClientSession(fabric.connect(1), table, 1, max_retries=-1)
