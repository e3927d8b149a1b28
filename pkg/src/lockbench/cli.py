"""Command-line interface: host a server, run workloads, check traces."""

from __future__ import annotations

import argparse
import sys
import time

from .bench import (
    TRANSPORT_INPROC,
    TRANSPORTS,
    WorkloadSpec,
    result_row,
    run_workload,
    sweep_clients,
    sweep_contention,
    write_csv,
)
from .checker import (
    DESIGN_CLIENT_CENTRIC,
    DESIGN_SERVER_SR,
    DESIGN_SERVER_TCP,
    DESIGNS,
    check_all,
    check_conservation,
    check_safety,
)
from .errors import RunCheckError
from .locktable import LockTable
from .server_lm import FRONTEND_SEND_RECV, FRONTEND_TCP, LockServer, ServerConfig
from .tcp_transport import TcpAgent
from .trace import TraceParseError, read_trace, write_trace


def _add_cost_args(parser) -> None:
    parser.add_argument(
        "--per-message-cost-us",
        type=float,
        default=None,
        metavar="US",
        help="simulated CPU cost per server message in microseconds "
        "(default: 20 for the TCP frontend, 2 for SEND/RECV)",
    )
    parser.add_argument(
        "--worker-limit",
        type=int,
        default=4,
        metavar="N",
        help="max concurrent message-processing workers (default 4)",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lockbench",
        description="Compare a server-centric and a client-centric lock manager "
        "over an emulated RDMA verb layer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    server_p = sub.add_parser(
        "server",
        help="host the chosen design over TCP until interrupted",
        description="Runs a lock server (server designs) or a passive lock-table "
        "host (client-centric) on a TCP port.  The bench subcommand self-hosts; "
        "this exists for manual experiments against a long-lived instance.",
    )
    server_p.add_argument("--design", choices=DESIGNS, default=DESIGN_SERVER_TCP)
    server_p.add_argument("--items", type=int, default=4, metavar="N")
    server_p.add_argument("--host", default="127.0.0.1")
    server_p.add_argument("--port", type=int, default=0)
    _add_cost_args(server_p)

    bench_p = sub.add_parser(
        "bench",
        help="run one workload or a sweep (self-hosted) and report throughput",
    )
    bench_p.add_argument("--design", choices=DESIGNS, required=True)
    bench_p.add_argument("--transport", choices=TRANSPORTS, default=TRANSPORT_INPROC)
    bench_p.add_argument("--clients", type=int, default=8, metavar="N")
    bench_p.add_argument("--items", type=int, default=4, metavar="N")
    bench_p.add_argument("--ops", type=int, default=1000, metavar="N")
    bench_p.add_argument("--shared-fraction", type=float, default=0.5, metavar="F")
    bench_p.add_argument("--backoff-us", type=float, default=0.0, metavar="US")
    bench_p.add_argument("--max-retries", type=int, default=None, metavar="N")
    bench_p.add_argument("--seed", type=int, default=1, metavar="N")
    bench_p.add_argument("--csv", metavar="PATH", help="write result rows as CSV")
    bench_p.add_argument("--trace", metavar="PATH", help="write the run's trace (single runs only)")
    bench_p.add_argument(
        "--sweep-clients",
        metavar="N,N,...",
        help="run once per client count instead of a single run",
    )
    bench_p.add_argument(
        "--sweep-items",
        metavar="N,N,...",
        help="run once per item count (contention sweep) instead of a single run",
    )
    _add_cost_args(bench_p)

    check_p = sub.add_parser(
        "check",
        help="validate a trace file; exit 0 iff no violations",
    )
    check_p.add_argument("trace", metavar="TRACE_PATH")
    check_p.add_argument(
        "--design",
        choices=DESIGNS,
        default=None,
        help="enables the FIFO check for server designs; without it only "
        "safety and conservation are checked",
    )
    return parser


def _cmd_server(args) -> int:
    if args.design == DESIGN_SERVER_TCP:
        cost = args.per_message_cost_us
        server = LockServer(
            ServerConfig(
                args.items,
                FRONTEND_TCP,
                20e-6 if cost is None else cost / 1e6,
                args.worker_limit,
            )
        )
        host, port = server.serve_tcp(args.host, args.port)
        print(f"server-tcp listening on {host}:{port} with {args.items} items", flush=True)
    elif args.design == DESIGN_SERVER_SR:
        agent = TcpAgent(args.host, args.port)
        host, port = agent.start()
        cost = args.per_message_cost_us
        server = LockServer(
            ServerConfig(
                args.items,
                FRONTEND_SEND_RECV,
                2e-6 if cost is None else cost / 1e6,
                args.worker_limit,
            )
        )
        server.serve_sr_listener(agent.sr_listen())
        print(f"server-sr listening on {host}:{port} with {args.items} items", flush=True)
    else:
        agent = TcpAgent(args.host, args.port)
        host, port = agent.start()
        table = LockTable.allocate(agent, args.items)
        print(
            f"lock-table host on {host}:{port}, region {table.region_id}, "
            f"{args.items} items",
            flush=True,
        )
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        return 0


def _spec_from_args(args) -> WorkloadSpec:
    cost = args.per_message_cost_us
    return WorkloadSpec(
        design=args.design,
        n_clients=args.clients,
        n_items=args.items,
        ops_per_client=args.ops,
        shared_fraction=args.shared_fraction,
        rng_seed=args.seed,
        transport=args.transport,
        backoff=args.backoff_us / 1e6,
        per_message_cost=None if cost is None else cost / 1e6,
        max_retries=args.max_retries,
        worker_limit=args.worker_limit,
    )


def _parse_counts(text: str, parser, flag: str) -> list[int]:
    try:
        counts = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        parser.error(f"{flag} expects a comma-separated list of integers")
    if not counts:
        parser.error(f"{flag} expects at least one count")
    return counts


def _cmd_bench(args, parser) -> int:
    spec = _spec_from_args(args)
    if args.sweep_clients and args.sweep_items:
        parser.error("--sweep-clients and --sweep-items are mutually exclusive")
    if args.sweep_clients or args.sweep_items:
        errors: list = []
        if args.sweep_clients:
            counts = _parse_counts(args.sweep_clients, parser, "--sweep-clients")
            rows = sweep_clients(spec, counts, errors)
        else:
            counts = _parse_counts(args.sweep_items, parser, "--sweep-items")
            rows = sweep_contention(spec, counts, errors)
        for row in rows:
            print(
                f"{row['design']:>16} clients={row['n_clients']:>3} items={row['n_items']:>4} "
                f"cr={row['contention_rate']:>6} throughput={row['throughput_lps'] or 'FAILED'}"
            )
        for failed_spec, exc in errors:
            print(f"run failed (clients={failed_spec.n_clients}, items={failed_spec.n_items}): {exc}",
                  file=sys.stderr)
        if args.csv:
            write_csv(args.csv, rows)
        return 1 if errors else 0
    try:
        result, events = run_workload(spec)
    except RunCheckError as exc:
        for violation in exc.violations:
            print(violation, file=sys.stderr)
        return 1
    print(
        f"{spec.design} on {spec.transport}: {result.total_locks_granted} locks in "
        f"{result.elapsed:.3f}s = {result.throughput:.1f} locks/s "
        f"(clients={spec.n_clients}, items={spec.n_items}, cr={result.contention_rate:.3f})"
    )
    if args.csv:
        write_csv(args.csv, [result_row(spec, result)])
    if args.trace:
        write_trace(args.trace, events)
    return 0


def _cmd_check(args) -> int:
    try:
        events = read_trace(args.trace)
    except OSError as exc:
        print(f"cannot read {args.trace}: {exc}", file=sys.stderr)
        return 2
    except TraceParseError as exc:
        print(f"malformed trace: {exc}", file=sys.stderr)
        return 2
    if args.design is not None:
        violations = check_all(events, args.design)
    else:
        violations = check_safety(events) + check_conservation(events)
    for violation in violations:
        print(violation)
    if not violations:
        print(f"{len(events)} events, no violations")
    return 0 if not violations else 1


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "server":
        return _cmd_server(args)
    if args.command == "bench":
        return _cmd_bench(args, parser)
    return _cmd_check(args)


if __name__ == "__main__":
    sys.exit(main())
