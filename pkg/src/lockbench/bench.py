"""Workload generation, experiment sweeps, and run metrics.

A run is closed-loop: every client performs acquire-then-release pairs on
uniformly random items with zero think time, so throughput reflects
saturation.  Per-client operation streams are derived from
`random.Random(f"{seed}:{client_index}")`, which is stable across both
threads and processes, making request sequences reproducible for any
transport.

Every run's trace is validated by the checker before metrics are
reported; a violating trace raises RunCheckError instead of returning
numbers.  The in-process transport runs clients as threads; the TCP
transport runs each client in its own process (forkserver start method,
so worker startup does not fork a thread-laden parent).

Design x transport matrix:

* server-tcp / inproc — in-process channels emulating the socket frontend
* server-tcp / tcp    — real sockets against the server's TCP port
* server-sr  / inproc — SEND/RECV queue pairs on the in-process fabric
* server-sr  / tcp    — SEND/RECV bridged through the TCP agent
* client-centric / inproc or tcp — one-sided verbs against the lock table
"""

from __future__ import annotations

import csv
import multiprocessing
import queue
import random
import threading
import time
from dataclasses import dataclass, replace
from typing import NamedTuple

from .checker import (
    CONSERVATION,
    DESIGN_CLIENT_CENTRIC,
    DESIGN_SERVER_SR,
    DESIGN_SERVER_TCP,
    DESIGNS,
    Violation,
    check_all,
)
from .client_lm import ClientSession
from .errors import ConfigurationError, RunCheckError
from .locktable import LockTable, TableHandle, check_client_capacity
from .server_lm import (
    DEFAULT_SR_MESSAGE_COST,
    DEFAULT_TCP_MESSAGE_COST,
    FRONTEND_SEND_RECV,
    FRONTEND_TCP,
    InprocChannel,
    LockServer,
    QpConn,
    ServerConfig,
    ServerLockClient,
    SocketConn,
)
from .trace import (  # noqa: F401  (re-exported: the trace file format lives with the bench)
    OP_ACQ,
    OUT_GRANT,
    TraceEvent,
    TraceRecorder,
    read_trace,
    write_trace,
)
from .verbs import InprocFabric
from .tcp_transport import TcpAgent, TcpFabric

TRANSPORT_INPROC = "inproc"
TRANSPORT_TCP = "tcp"
TRANSPORTS = (TRANSPORT_INPROC, TRANSPORT_TCP)

CSV_COLUMNS = [
    "design",
    "transport",
    "n_clients",
    "n_items",
    "contention_rate",
    "shared_fraction",
    "total_locks",
    "elapsed_s",
    "throughput_lps",
    "seed",
]


def contention_rate(n_items: int, n_clients: int) -> float:
    """1 - n_items/n_clients.  Negative when items outnumber clients; the
    value is reported as computed."""
    if n_clients < 1:
        raise ConfigurationError(f"n_clients must be >= 1, got {n_clients}")
    return 1 - n_items / n_clients


@dataclass
class WorkloadSpec:
    design: str
    n_clients: int = 8
    n_items: int = 4
    ops_per_client: int = 1000
    shared_fraction: float = 0.5
    rng_seed: int = 1
    transport: str = TRANSPORT_INPROC
    backoff: float = 0.0
    per_message_cost: float | None = None  # None -> frontend default
    max_retries: int | None = None
    worker_limit: int = 4

    def validate(self) -> None:
        if self.design not in DESIGNS:
            raise ConfigurationError(f"unknown design {self.design!r}")
        if self.transport not in TRANSPORTS:
            raise ConfigurationError(f"unknown transport {self.transport!r}")
        if self.n_clients < 1 or self.n_items < 1 or self.ops_per_client < 1:
            raise ConfigurationError("n_clients, n_items and ops_per_client must be >= 1")
        if not 0 <= self.shared_fraction <= 1:
            raise ConfigurationError(
                f"shared_fraction must be in [0, 1], got {self.shared_fraction}"
            )
        if self.backoff < 0:
            raise ConfigurationError("backoff must be >= 0")
        if self.per_message_cost is not None and self.per_message_cost < 0:
            raise ConfigurationError("per_message_cost must be >= 0")
        try:
            check_client_capacity(self.n_clients)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None

    def effective_message_cost(self) -> float:
        if self.per_message_cost is not None:
            return self.per_message_cost
        return (
            DEFAULT_SR_MESSAGE_COST
            if self.design == DESIGN_SERVER_SR
            else DEFAULT_TCP_MESSAGE_COST
        )


class LatencyStats(NamedTuple):
    count: int
    mean_s: float
    max_s: float


@dataclass
class RunResult:
    total_locks_granted: int
    elapsed: float
    throughput: float
    per_client_latency_stats: dict[int, LatencyStats]
    contention_rate: float


def client_op_stream(spec: WorkloadSpec, client_index: int) -> list[tuple[int, bool]]:
    """The deterministic (item, shared?) sequence for one client."""
    rng = random.Random(f"{spec.rng_seed}:{client_index}")
    return [
        (rng.randrange(spec.n_items), rng.random() < spec.shared_fraction)
        for _ in range(spec.ops_per_client)
    ]


def _drive(client, ops) -> tuple[int, int, list[int]]:
    """Run the closed loop; returns (start_ns, end_ns, acquire latencies ns)."""
    latencies = []
    start = time.monotonic_ns()
    for item, shared in ops:
        t0 = time.monotonic_ns()
        client.acquire(item, shared)
        latencies.append(time.monotonic_ns() - t0)
        client.release(item)
    return start, time.monotonic_ns(), latencies


# ---------------------------------------------------------------------------
# In-process transport: clients are threads.


def _build_inproc(spec: WorkloadSpec, recorder: TraceRecorder):
    """Returns (clients, teardown callable, quiescence words callable)."""
    if spec.design == DESIGN_CLIENT_CENTRIC:
        fabric = InprocFabric()
        table = LockTable.allocate(fabric, spec.n_items)
        clients = [
            ClientSession(
                fabric.connect(i),
                table.handle(),
                i,
                backoff=spec.backoff,
                max_retries=spec.max_retries,
                recorder=recorder,
            )
            for i in range(1, spec.n_clients + 1)
        ]
        return clients, fabric.close, table.words
    cost = spec.effective_message_cost()
    if spec.design == DESIGN_SERVER_TCP:
        server = LockServer(
            ServerConfig(spec.n_items, FRONTEND_TCP, cost, spec.worker_limit), recorder
        )
        clients = []
        for i in range(1, spec.n_clients + 1):
            channel = InprocChannel()
            server.attach_channel(channel)
            clients.append(ServerLockClient(channel, i, recorder))
        return clients, server.shutdown, None
    server = LockServer(
        ServerConfig(spec.n_items, FRONTEND_SEND_RECV, cost, spec.worker_limit), recorder
    )
    fabric = InprocFabric()
    server.serve_sr_listener(fabric.sr_listen())

    def teardown():
        server.shutdown()
        fabric.close()

    clients = [
        ServerLockClient(QpConn(fabric.connect(i)), i, recorder)
        for i in range(1, spec.n_clients + 1)
    ]
    return clients, teardown, None


def _run_inproc(spec: WorkloadSpec) -> tuple[RunResult, list[TraceEvent]]:
    recorder = TraceRecorder()
    clients, teardown, quiesce = _build_inproc(spec, recorder)
    barrier = threading.Barrier(spec.n_clients)
    results: list[object] = [None] * spec.n_clients

    def work(idx: int) -> None:
        try:
            ops = client_op_stream(spec, idx + 1)
            barrier.wait()
            results[idx] = _drive(clients[idx], ops)
        except Exception as exc:  # re-raised in the harness thread
            results[idx] = exc

    threads = [
        threading.Thread(target=work, args=(i,), name=f"bench-client-{i + 1}")
        for i in range(spec.n_clients)
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    try:
        for i, outcome in enumerate(results):
            if isinstance(outcome, Exception):
                raise RuntimeError(f"client {i + 1} failed") from outcome
        words = quiesce() if quiesce is not None else None
        per_client = {
            i + 1: outcome for i, outcome in enumerate(results)
        }
        return _finish(spec, recorder.sorted_events(), per_client, words)
    finally:
        for client in clients:
            try:
                client.close()
            except Exception:
                pass
        teardown()


# ---------------------------------------------------------------------------
# TCP transport: clients are processes.

_MP_CONTEXT = None


def _mp_context():
    global _MP_CONTEXT
    if _MP_CONTEXT is None:
        ctx = multiprocessing.get_context("forkserver")
        ctx.set_forkserver_preload(["lockbench.bench"])
        _MP_CONTEXT = ctx
    return _MP_CONTEXT


def _connect_tcp_client(spec, client_index, address, region_id, recorder):
    host, port = address
    if spec.design == DESIGN_SERVER_TCP:
        return ServerLockClient(SocketConn(host, port), client_index, recorder)
    if spec.design == DESIGN_SERVER_SR:
        qp = TcpFabric(host, port).connect(client_index)
        return ServerLockClient(QpConn(qp), client_index, recorder)
    qp = TcpFabric(host, port).connect(client_index)
    return ClientSession(
        qp,
        TableHandle(region_id, spec.n_items),
        client_index,
        backoff=spec.backoff,
        max_retries=spec.max_retries,
        recorder=recorder,
    )


def _tcp_client_worker(spec, client_index, address, region_id, barrier, results_queue):
    try:
        recorder = TraceRecorder()
        client = _connect_tcp_client(spec, client_index, address, region_id, recorder)
        ops = client_op_stream(spec, client_index)
        barrier.wait()
        start, end, latencies = _drive(client, ops)
        client.close()
        results_queue.put(
            (client_index, start, end, latencies, recorder.sorted_events(), None)
        )
    except Exception as exc:
        results_queue.put((client_index, 0, 0, [], [], f"{type(exc).__name__}: {exc}"))


def _run_tcp(spec: WorkloadSpec) -> tuple[RunResult, list[TraceEvent]]:
    recorder = TraceRecorder()
    agent = None
    server = None
    table = None
    region_id = 0
    if spec.design == DESIGN_SERVER_TCP:
        server = LockServer(
            ServerConfig(spec.n_items, FRONTEND_TCP, spec.effective_message_cost(), spec.worker_limit),
            recorder,
        )
        address = server.serve_tcp()
    elif spec.design == DESIGN_SERVER_SR:
        agent = TcpAgent()
        address = agent.start()
        server = LockServer(
            ServerConfig(
                spec.n_items, FRONTEND_SEND_RECV, spec.effective_message_cost(), spec.worker_limit
            ),
            recorder,
        )
        server.serve_sr_listener(agent.sr_listen())
    else:
        agent = TcpAgent()
        address = agent.start()
        table = LockTable.allocate(agent, spec.n_items)
        region_id = table.region_id

    ctx = _mp_context()
    barrier = ctx.Barrier(spec.n_clients)
    results_queue = ctx.Queue()
    procs = [
        ctx.Process(
            target=_tcp_client_worker,
            args=(spec, i, address, region_id, barrier, results_queue),
            daemon=True,
        )
        for i in range(1, spec.n_clients + 1)
    ]
    try:
        for proc in procs:
            proc.start()
        per_client: dict[int, tuple[int, int, list[int]]] = {}
        errors = []
        for _ in procs:
            try:
                idx, start, end, latencies, events, error = results_queue.get(timeout=120)
            except queue.Empty:
                codes = [proc.exitcode for proc in procs]
                raise RuntimeError(
                    f"client process produced no result (exit codes: {codes})"
                ) from None
            if error is not None:
                errors.append(f"client {idx}: {error}")
            else:
                per_client[idx] = (start, end, latencies)
                recorder.extend(events)
        for proc in procs:
            proc.join(timeout=30)
        if errors:
            raise RuntimeError("; ".join(errors))
        words = table.words() if table is not None else None
        return _finish(spec, recorder.sorted_events(), per_client, words)
    finally:
        for proc in procs:
            if proc.is_alive():
                proc.terminate()
        if server is not None:
            server.shutdown()
        if agent is not None:
            agent.stop()


# ---------------------------------------------------------------------------


def _finish(spec, events, per_client, words):
    violations = check_all(events, spec.design)
    if words is not None:
        violations.extend(
            Violation(CONSERVATION, f"lock word {item} nonzero at shutdown: {word:#x}")
            for item, word in enumerate(words)
            if word != 0
        )
    total = sum(len(latencies) for _, _, latencies in per_client.values())
    grants = sum(1 for e in events if e.op == OP_ACQ and e.outcome == OUT_GRANT)
    if grants != total:
        violations.append(
            Violation(
                CONSERVATION,
                f"trace has {grants} grant events but clients report {total} acquisitions",
            )
        )
    if violations:
        raise RunCheckError(violations)
    start = min(s for s, _, _ in per_client.values())
    end = max(e for _, e, _ in per_client.values())
    elapsed = max(end - start, 1) / 1e9
    stats = {
        client_id: LatencyStats(
            len(latencies), sum(latencies) / len(latencies) / 1e9, max(latencies) / 1e9
        )
        for client_id, (_, _, latencies) in sorted(per_client.items())
        if latencies
    }
    result = RunResult(
        total_locks_granted=total,
        elapsed=elapsed,
        throughput=total / elapsed,
        per_client_latency_stats=stats,
        contention_rate=contention_rate(spec.n_items, spec.n_clients),
    )
    return result, events


def run_workload(spec: WorkloadSpec) -> tuple[RunResult, list[TraceEvent]]:
    """Run one workload; returns (metrics, full sorted trace).

    Raises RunCheckError if the trace fails any applicable check — a run
    never reports throughput from an unverified trace.
    """
    spec.validate()
    if spec.transport == TRANSPORT_INPROC:
        result, events = _run_inproc(spec)
    else:
        result, events = _run_tcp(spec)
    return result, events


# ---------------------------------------------------------------------------
# Sweeps and CSV.


def result_row(spec: WorkloadSpec, result: RunResult) -> dict:
    return {
        "design": spec.design,
        "transport": spec.transport,
        "n_clients": spec.n_clients,
        "n_items": spec.n_items,
        "contention_rate": f"{result.contention_rate:.6g}",
        "shared_fraction": f"{spec.shared_fraction:.6g}",
        "total_locks": result.total_locks_granted,
        "elapsed_s": f"{result.elapsed:.6f}",
        "throughput_lps": f"{result.throughput:.2f}",
        "seed": spec.rng_seed,
    }


def _failed_row(spec: WorkloadSpec) -> dict:
    return {
        "design": spec.design,
        "transport": spec.transport,
        "n_clients": spec.n_clients,
        "n_items": spec.n_items,
        "contention_rate": f"{contention_rate(spec.n_items, spec.n_clients):.6g}",
        "shared_fraction": f"{spec.shared_fraction:.6g}",
        "total_locks": "",
        "elapsed_s": "",
        "throughput_lps": "",
        "seed": spec.rng_seed,
    }


def _sweep(base: WorkloadSpec, specs, errors_out: list | None) -> list[dict]:
    rows = []
    for spec in specs:
        try:
            result, _ = run_workload(spec)
        except Exception as exc:
            if errors_out is not None:
                errors_out.append((spec, exc))
            rows.append(_failed_row(spec))
            continue
        rows.append(result_row(spec, result))
    return rows


def sweep_clients(base: WorkloadSpec, client_counts, errors_out: list | None = None) -> list[dict]:
    """One run per client count at fixed n_items; failed points produce a
    row with empty metric columns and the sweep continues."""
    if not client_counts:
        raise ConfigurationError("client_counts must be nonempty")
    return _sweep(base, (replace(base, n_clients=n) for n in client_counts), errors_out)


def sweep_contention(base: WorkloadSpec, item_counts, errors_out: list | None = None) -> list[dict]:
    """One run per item count at fixed n_clients; each row carries the
    computed contention rate."""
    if not item_counts:
        raise ConfigurationError("item_counts must be nonempty")
    return _sweep(base, (replace(base, n_items=n) for n in item_counts), errors_out)


def write_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
