"""Operator command line: simulate traffic, run cycles, serve the API, export reports.

Exit codes: 0 success, 1 operation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import FlywheelError
from .orchestrator import CycleConfig, Orchestrator, build_runtime
from .simulate import run_simulation
from .store import EventStore

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flywheel",
        description="Closed-loop improvement control plane for a RAG assistant.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="populate a store with scripted sessions")
    simulate.add_argument("--store", default="./flywheel-store", help="store directory")
    simulate.add_argument("--sessions", type=int, required=True)
    simulate.add_argument("--error-rate", type=float, default=0.05)
    simulate.add_argument("--seed", type=int, default=1234)

    cycle = sub.add_parser("cycle", help="run one monitor/analyze/plan/execute cycle")
    cycle.add_argument("--config", required=True, help="cycle config JSON file")
    cycle.add_argument("--out", help="write the full cycle report JSON here")

    serve = sub.add_parser("serve", help="host the HTTP API")
    serve.add_argument("--config", required=True, help="cycle config JSON file")
    serve.add_argument("--port", type=int, help="override the configured port")
    serve.add_argument("--host", default="127.0.0.1")

    report = sub.add_parser("report", help="print a stored cycle report")
    report.add_argument("--store", required=True, help="store directory")
    report.add_argument("--cycle", required=True, help="cycle id, or 'latest'")
    report.add_argument("--format", choices=("table", "lines"), default="table")

    export = sub.add_parser("export", help="dump stored events as line-delimited JSON")
    export.add_argument("--store", required=True, help="store directory")
    export.add_argument(
        "--kind",
        required=True,
        choices=("trace", "feedback", "label", "dataset", "variant", "rollout", "report"),
    )
    export.add_argument("--out", required=True, help="destination file")
    return parser


def _cmd_simulate(args: argparse.Namespace) -> int:
    result = run_simulation(
        store_dir=args.store,
        sessions=args.sessions,
        error_rate=args.error_rate,
        seed=args.seed,
    )
    print(
        f"simulated {result.sessions} sessions -> {result.traces} traces, "
        f"{result.negatives} negatives "
        f"({len(result.routing_error_trace_ids)} routing errors, "
        f"{len(result.rephrasal_error_trace_ids)} rephrasal errors)"
    )
    print(f"store: {result.store_dir}")
    print(f"ground truth: {result.ground_truth_path}")
    print(f"cycle config: {result.cycle_config_path}")
    return EXIT_OK


def _cmd_cycle(args: argparse.Namespace) -> int:
    config = CycleConfig.from_file(args.config)
    runtime = build_runtime(config)
    try:
        report = Orchestrator(runtime).run_cycle()
    finally:
        runtime.store.close()
    print(report.render_summary())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        print(f"report written to {args.out}")
    failed = [
        name
        for name, stage in (
            ("monitor", report.monitor),
            ("analyze", report.analyze),
            ("plan", report.plan),
            ("execute", report.execute),
        )
        if stage.status == "failed"
    ]
    if failed:
        print(f"failed stages: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .api import create_app

    config = CycleConfig.from_file(args.config)
    runtime = build_runtime(config)
    app = create_app(runtime)
    port = args.port if args.port is not None else config.serve_port
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return EXIT_OK


def _render_report_table(payload: dict) -> str:
    lines = [
        f"cycle id      {payload['cycle_id']}",
        f"started at    {payload['started_at']}",
        f"traces        {payload['counts'].get('traces', 0)}",
        f"positives     {payload['counts'].get('positives', 0)}",
        f"negatives     {payload['counts'].get('negatives', 0)}",
    ]
    error_report = (payload.get("analyze") or {}).get("error_report") or {}
    for stage, info in (error_report.get("stages") or {}).items():
        lines.append(f"error {stage:<16} {info['count']:>6} {info['percentage']:>8}%")
    unattributed = error_report.get("unattributed")
    if unattributed:
        lines.append(
            f"error {'unattributed':<16} {unattributed['count']:>6} "
            f"{unattributed['percentage']:>8}%"
        )
    for dataset in (payload.get("plan") or {}).get("datasets", []):
        sizes = " ".join(f"{k}={v}" for k, v in dataset["split_sizes"].items())
        lines.append(f"dataset {dataset['dataset_id']} task={dataset['task']} {sizes}")
    gate_info = (payload.get("execute") or {}).get("gate")
    if gate_info:
        lines.append(f"gate decision {gate_info['decision']}")
    return "\n".join(lines)


def _cmd_report(args: argparse.Namespace) -> int:
    store = EventStore(args.store, fsync=False)
    try:
        reports = [
            event.payload
            for event in store.scan("report")
            if event.payload.get("type") == "cycle_report"
        ]
    finally:
        store.close()
    if args.cycle == "latest":
        payload = reports[-1] if reports else None
    else:
        payload = next((r for r in reports if r.get("cycle_id") == args.cycle), None)
    if payload is None:
        print(f"no cycle report {args.cycle!r}", file=sys.stderr)
        return EXIT_FAILURE
    if args.format == "lines":
        print(json.dumps(payload))
    else:
        print(_render_report_table(payload))
    return EXIT_OK


def _cmd_export(args: argparse.Namespace) -> int:
    store = EventStore(args.store, fsync=False)
    try:
        count = store.export_lines(args.kind, args.out)
    finally:
        store.close()
    print(f"exported {count} {args.kind} events to {args.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; keep that contract.
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "cycle":
            return _cmd_cycle(args)
        if args.command == "serve":
            return _cmd_serve(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "export":
            return _cmd_export(args)
    except FlywheelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
