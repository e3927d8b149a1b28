"""Offline safety and fairness oracle over recorded traces.

Hold intervals are reconstructed per client as [ACQ/GRANT stamp, REL/REQ
stamp].  Grants are stamped by the acquirer after the lock is won and
release requests are stamped before the releasing verb or message is
issued, so every stamped interval is contained in the true hold interval;
on a shared monotonic clock an overlap between stamped intervals is
therefore a real overlap, never a stamping artifact.

check_fifo re-derives the server's admission rule from scratch (queue
arrival order from server-stamped REQ events, grants admissible only from
the compatible head batch) instead of importing the server's own scanner,
so a server bug cannot hide from its own checker.

A small brute-force model checker over the client-driven protocol
(lock word x per-client program counters) backs the trace oracle: it
enumerates every interleaving of the protocol's atomic steps and asserts
no reachable state has conflicting holders and every terminal state
leaves the word zero.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .locktable import U32_MASK, decode, encode
from .trace import (
    MODE_EXCLUSIVE,
    MODE_SHARED,
    OP_ACQ,
    OP_REL,
    OUT_ACK,
    OUT_GRANT,
    OUT_REQ,
    OUT_TIMEOUT,
    TraceEvent,
)

DOUBLE_EXCLUSIVE = "DOUBLE_EXCLUSIVE"
SHARED_EXCLUSIVE_OVERLAP = "SHARED_EXCLUSIVE_OVERLAP"
FIFO_VIOLATION = "FIFO_VIOLATION"
CONSERVATION = "CONSERVATION"
ORPHAN_EVENT = "ORPHAN_EVENT"

DESIGN_SERVER_TCP = "server-tcp"
DESIGN_SERVER_SR = "server-sr"
DESIGN_CLIENT_CENTRIC = "client-centric"
SERVER_DESIGNS = (DESIGN_SERVER_TCP, DESIGN_SERVER_SR)
DESIGNS = SERVER_DESIGNS + (DESIGN_CLIENT_CENTRIC,)


class NotApplicableError(ValueError):
    """The requested check makes no claim about this design."""


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    events: tuple[TraceEvent, ...] = ()

    def __str__(self) -> str:
        return f"{self.kind}: {self.detail}"


# Causality-friendly tiebreak for identical nanosecond stamps: within a
# lock's lifecycle REQ precedes GRANT precedes release.
_PHASE_RANK = {
    (OP_ACQ, OUT_REQ): 0,
    (OP_ACQ, OUT_GRANT): 1,
    (OP_ACQ, OUT_TIMEOUT): 1,
    (OP_REL, OUT_REQ): 2,
    (OP_REL, OUT_TIMEOUT): 2,
    (OP_REL, OUT_ACK): 3,
}


def sort_events(events) -> list[TraceEvent]:
    return sorted(
        events,
        key=lambda e: (e.timestamp_ns, _PHASE_RANK[(e.op, e.outcome)], e.client_id, e.item_id),
    )


def check_safety(events) -> list[Violation]:
    """Replay hold intervals per item; flag conflicting concurrent holders.

    A GRANT while an incompatible holder is still inside its stamped
    interval is DOUBLE_EXCLUSIVE (both exclusive) or
    SHARED_EXCLUSIVE_OVERLAP.  Releases of locks the trace never granted,
    and grants to a client already holding the item, are ORPHAN_EVENT.
    """
    ordered = sort_events(events)

    # Hold intervals are half-open: a grant stamped at the same nanosecond
    # as the previous holder's release is adjacent, not overlapping.  Map
    # each grant to its release stamp up front so ties can be resolved.
    open_grants: dict[tuple[int, int], list[TraceEvent]] = {}
    release_at: dict[int, int] = {}
    for event in ordered:
        key = (event.item_id, event.client_id)
        if event.op == OP_ACQ and event.outcome == OUT_GRANT:
            open_grants.setdefault(key, []).append(event)
        elif event.op == OP_REL and event.outcome == OUT_REQ:
            stack = open_grants.get(key)
            if stack:
                release_at[id(stack.pop())] = event.timestamp_ns

    violations: list[Violation] = []
    holders: dict[int, dict[int, TraceEvent]] = {}  # item -> client -> grant event
    pre_released: set[tuple[int, int]] = set()
    for event in ordered:
        item_holders = holders.setdefault(event.item_id, {})
        if event.op == OP_ACQ and event.outcome == OUT_GRANT:
            expired = [
                client_id
                for client_id, held in item_holders.items()
                if release_at.get(id(held), event.timestamp_ns + 1) <= event.timestamp_ns
            ]
            for client_id in expired:
                del item_holders[client_id]
                pre_released.add((event.item_id, client_id))
            previous = item_holders.get(event.client_id)
            if previous is not None:
                violations.append(
                    Violation(
                        ORPHAN_EVENT,
                        f"client {event.client_id} granted item {event.item_id} twice",
                        (previous, event),
                    )
                )
            for other in item_holders.values():
                if other.client_id == event.client_id:
                    continue
                if event.mode == MODE_EXCLUSIVE and other.mode == MODE_EXCLUSIVE:
                    kind = DOUBLE_EXCLUSIVE
                elif MODE_EXCLUSIVE in (event.mode, other.mode):
                    kind = SHARED_EXCLUSIVE_OVERLAP
                else:
                    continue
                violations.append(
                    Violation(
                        kind,
                        f"item {event.item_id}: client {event.client_id} ({event.mode}) "
                        f"overlaps client {other.client_id} ({other.mode})",
                        (other, event),
                    )
                )
            item_holders[event.client_id] = event
        elif event.op == OP_REL and event.outcome == OUT_REQ:
            key = (event.item_id, event.client_id)
            if key in pre_released:
                pre_released.discard(key)
            elif item_holders.pop(event.client_id, None) is None:
                violations.append(
                    Violation(
                        ORPHAN_EVENT,
                        f"client {event.client_id} released item {event.item_id} "
                        "without holding it",
                        (event,),
                    )
                )
    return violations


@dataclass
class _PendingReq:
    client_id: int
    mode: str
    event: TraceEvent


def _admissible(pending: deque, granted: dict) -> set[int]:
    """Clients the FIFO admission rule may grant right now."""
    if not pending or MODE_EXCLUSIVE in granted.values():
        return set()
    if pending[0].mode == MODE_EXCLUSIVE:
        return {pending[0].client_id} if not granted else set()
    admissible = set()
    for req in pending:
        if req.mode != MODE_SHARED:
            break
        admissible.add(req.client_id)
    return admissible


def check_fifo(events, design: str) -> list[Violation]:
    """Verify grant order against arrival order, allowing only the
    consecutive-SHARED batch exception.  Only the server designs promise
    FIFO; a client-centric trace raises NotApplicableError."""
    if design == DESIGN_CLIENT_CENTRIC:
        raise NotApplicableError("the client-centric design makes no FIFO claim")
    if design not in SERVER_DESIGNS:
        raise ValueError(f"unknown design {design!r}")
    violations: list[Violation] = []
    pending: dict[int, deque] = {}
    granted: dict[int, dict[int, str]] = {}
    for event in sort_events(events):
        item_pending = pending.setdefault(event.item_id, deque())
        item_granted = granted.setdefault(event.item_id, {})
        if event.op == OP_ACQ and event.outcome == OUT_REQ:
            item_pending.append(_PendingReq(event.client_id, event.mode, event))
        elif event.op == OP_ACQ and event.outcome == OUT_GRANT:
            admissible = _admissible(item_pending, item_granted)
            if event.client_id not in admissible:
                cited = (item_pending[0].event, event) if item_pending else (event,)
                violations.append(
                    Violation(
                        FIFO_VIOLATION,
                        f"item {event.item_id}: grant to client {event.client_id} "
                        "jumps the queue",
                        cited,
                    )
                )
                # Keep simulating past the violation.
            for req in item_pending:
                if req.client_id == event.client_id:
                    item_pending.remove(req)
                    break
            item_granted[event.client_id] = event.mode
        elif event.op == OP_REL and event.outcome == OUT_REQ:
            item_granted.pop(event.client_id, None)
    return violations


def check_conservation(events) -> list[Violation]:
    """End-of-run accounting per (client, item): every request answered,
    every grant released, every release acknowledged, every shared timeout
    rolled back.  Counting is order-insensitive, so it tolerates the
    nanosecond-scale stamp ties interval replay cannot."""
    counts: dict[tuple[int, int], dict[str, int]] = {}
    last_event: dict[tuple[int, int], TraceEvent] = {}
    for event in events:
        key = (event.client_id, event.item_id)
        c = counts.setdefault(
            key,
            {"req": 0, "grant": 0, "timeout_shared": 0, "timeout_excl": 0,
             "rel_req": 0, "rel_ack": 0, "rollback": 0},
        )
        last_event[key] = event
        if event.op == OP_ACQ:
            if event.outcome == OUT_REQ:
                c["req"] += 1
            elif event.outcome == OUT_GRANT:
                c["grant"] += 1
            elif event.outcome == OUT_TIMEOUT:
                c["timeout_shared" if event.mode == MODE_SHARED else "timeout_excl"] += 1
        else:
            if event.outcome == OUT_REQ:
                c["rel_req"] += 1
            elif event.outcome == OUT_ACK:
                c["rel_ack"] += 1
            elif event.outcome == OUT_TIMEOUT:
                c["rollback"] += 1
    violations: list[Violation] = []

    def flag(key, message):
        client_id, item_id = key
        violations.append(
            Violation(
                CONSERVATION,
                f"client {client_id} item {item_id}: {message}",
                (last_event[key],),
            )
        )

    for key, c in sorted(counts.items()):
        answered = c["grant"] + c["timeout_shared"] + c["timeout_excl"]
        if c["req"] != answered:
            flag(key, f"{c['req']} acquire request(s) but {answered} grant(s)/timeout(s)")
        if c["grant"] != c["rel_req"]:
            flag(key, f"{c['grant']} grant(s) but {c['rel_req']} release(s)")
        if c["rel_req"] != c["rel_ack"]:
            flag(key, f"{c['rel_req']} release(s) but {c['rel_ack']} ack(s)")
        if c["timeout_shared"] != c["rollback"]:
            flag(
                key,
                f"{c['timeout_shared']} shared timeout(s) but {c['rollback']} rollback(s)",
            )
    return violations


def check_all(events, design: str) -> list[Violation]:
    """Every applicable check for one run's trace."""
    events = list(events)
    violations = check_safety(events)
    violations.extend(check_conservation(events))
    if design in SERVER_DESIGNS:
        violations.extend(check_fifo(events, design))
    return violations


# ---------------------------------------------------------------------------
# Brute-force model check of the client-driven protocol.

_START = "start"
_POLL = "poll"
_HOLD = "hold"
_DONE = "done"


@dataclass
class ModelResult:
    states_explored: int
    unsafe: list = field(default_factory=list)
    bad_terminal: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.unsafe and not self.bad_terminal


def _step(word: int, phase: str, mode: str, client_id: int, full_word_release: bool):
    """The client's next atomic step from `phase`, or None if it is a
    no-progress retry (failed CAS, failed poll) that leaves state unchanged."""
    owner, count = decode(word)
    if mode == MODE_EXCLUSIVE:
        if phase == _START:
            if word == 0:
                return encode(client_id, 0), _HOLD
            return None
        if phase == _HOLD:
            released = 0 if full_word_release else encode(0, count)
            return released, _DONE
    else:
        if phase == _START:
            new_word = (word + 1) & ((1 << 64) - 1)
            return new_word, (_HOLD if owner == 0 else _POLL)
        if phase == _POLL:
            if owner == 0:
                return word, _HOLD
            return None
        if phase == _HOLD:
            return (word - 1) & ((1 << 64) - 1), _DONE
    raise AssertionError(f"no step from phase {phase!r}")


def _is_unsafe(phases, modes) -> bool:
    holders = [modes[i] for i, p in enumerate(phases) if p == _HOLD]
    exclusive = sum(1 for m in holders if m == MODE_EXCLUSIVE)
    return exclusive >= 2 or (exclusive >= 1 and len(holders) > exclusive)


def explore(modes, full_word_release: bool = False) -> ModelResult:
    """Enumerate every interleaving of the client-driven protocol for one
    item and the given client modes.

    `full_word_release` swaps the half-word exclusive release for a write
    that zeroes the whole word — a deliberately broken variant that erases
    pre-registered shared counts, used as the negative control.
    """
    modes = list(modes)
    for mode in modes:
        if mode not in (MODE_SHARED, MODE_EXCLUSIVE):
            raise ValueError(f"unknown mode {mode!r}")
    initial = (0, tuple(_START for _ in modes))
    seen = {initial}
    frontier = deque([initial])
    result = ModelResult(states_explored=0)
    while frontier:
        word, phases = frontier.popleft()
        result.states_explored += 1
        if _is_unsafe(phases, modes):
            result.unsafe.append((word, phases))
        if all(p == _DONE for p in phases):
            if word != 0:
                result.bad_terminal.append((word, phases))
            continue
        for i, phase in enumerate(phases):
            if phase == _DONE:
                continue
            step = _step(word, phase, modes[i], i + 1, full_word_release)
            if step is None:
                continue
            new_word, new_phase = step
            state = (new_word, phases[:i] + (new_phase,) + phases[i + 1 :])
            if state not in seen:
                seen.add(state)
                frontier.append(state)
    return result
