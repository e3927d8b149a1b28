"""Trace events and the on-disk trace format.

One event per line: `timestamp_ns,client_id,item_id,op,mode,outcome` with
op in {ACQ, REL}, mode in {SHARED, EXCLUSIVE}, outcome in {REQ, GRANT,
ACK, TIMEOUT}.  Timestamps come from the shared monotonic clock and are
strictly increasing per recording source, so a sorted trace preserves each
client's program order.
"""

from __future__ import annotations

import time
from typing import Iterable, NamedTuple

OP_ACQ = "ACQ"
OP_REL = "REL"
OPS = (OP_ACQ, OP_REL)

MODE_SHARED = "SHARED"
MODE_EXCLUSIVE = "EXCLUSIVE"
MODES = (MODE_SHARED, MODE_EXCLUSIVE)

OUT_REQ = "REQ"
OUT_GRANT = "GRANT"
OUT_ACK = "ACK"
OUT_TIMEOUT = "TIMEOUT"
OUTCOMES = (OUT_REQ, OUT_GRANT, OUT_ACK, OUT_TIMEOUT)


class TraceEvent(NamedTuple):
    timestamp_ns: int
    client_id: int
    item_id: int
    op: str
    mode: str
    outcome: str


class TraceParseError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def format_event(event: TraceEvent) -> str:
    return ",".join(
        (
            str(event.timestamp_ns),
            str(event.client_id),
            str(event.item_id),
            event.op,
            event.mode,
            event.outcome,
        )
    )


def parse_line(line: str, lineno: int) -> TraceEvent:
    parts = line.strip().split(",")
    if len(parts) != 6:
        raise TraceParseError(lineno, f"expected 6 fields, got {len(parts)}")
    ts_s, client_s, item_s, op, mode, outcome = parts
    try:
        ts, client, item = int(ts_s), int(client_s), int(item_s)
    except ValueError as exc:
        raise TraceParseError(lineno, str(exc)) from None
    if op not in OPS:
        raise TraceParseError(lineno, f"unknown op {op!r}")
    if mode not in MODES:
        raise TraceParseError(lineno, f"unknown mode {mode!r}")
    if outcome not in OUTCOMES:
        raise TraceParseError(lineno, f"unknown outcome {outcome!r}")
    return TraceEvent(ts, client, item, op, mode, outcome)


def write_trace(path, events: Iterable[TraceEvent]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for event in events:
            fh.write(format_event(event))
            fh.write("\n")


def read_trace(path) -> list[TraceEvent]:
    events = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                events.append(parse_line(line, lineno))
    return events


class TraceRecorder:
    """Append-only event sink shared by concurrently running actors.

    list.append is atomic under the GIL, so recording takes no lock; the
    per-source strictly-increasing timestamp is maintained with a plain
    dict keyed by recording source (client ID, or 0 for the server).
    """

    def __init__(self):
        self._events: list[TraceEvent] = []
        self._last_ts: dict[int, int] = {}

    def record(self, source: int, client_id: int, item_id: int, op: str, mode: str, outcome: str) -> None:
        ts = time.monotonic_ns()
        last = self._last_ts.get(source, 0)
        if ts <= last:
            ts = last + 1
        self._last_ts[source] = ts
        self._events.append(TraceEvent(ts, client_id, item_id, op, mode, outcome))

    def extend(self, events: Iterable[TraceEvent]) -> None:
        self._events.extend(events)

    def sorted_events(self) -> list[TraceEvent]:
        return sorted(self._events)
