"""Operator command line: validate specs, execute staged runs, replay stored
runs, drive chaos experiments, render reports, serve the dashboard API.

Exit codes are the scripting contract: 0 success/passed, 1 validation or usage
failure, 2 run failed, 3 run aborted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .errors import CopilotError, IntegrityError
from .model import load_workflow, serialize_workflow
from .runner import TERMINAL_EXIT_CODES, RunSupervisor
from .stages import CheckContext, run_checks
from .store import EventStore, Query
from .monitors import replay_verdicts, stored_verdicts

log = logging.getLogger(__name__)


def _home(args) -> Path:
    return Path(args.home or os.environ.get("COPILOT_HOME") or "./runs")


def _print_record(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def cmd_validate(args) -> int:
    try:
        spec = load_workflow(args.spec)
    except CopilotError as exc:
        if args.format == "record":
            _print_record(exc.record())
        else:
            print(f"invalid: [{exc.code}] {exc}")
        return 1
    ctx = CheckContext(Path(args.spec).resolve().parent)
    failures = 0
    for stage in spec.stages:
        if stage.kind != "static-check":
            continue
        for result in run_checks(stage, spec, ctx):
            if args.format == "record":
                _print_record({"check": result.check_id, "outcome": result.outcome,
                               "detail": result.detail,
                               "duration_ms": round(result.duration_ms, 3)})
            else:
                print(f"[{result.outcome:4}] {result.check_id}: {result.detail}")
            if result.outcome == "fail":
                failures += 1
                if args.format != "record":
                    print(f"validation failed at check {result.check_id!r}")
                    return 1
    if failures:
        return 1
    if args.format != "record":
        print(f"{spec.name}: valid ({len(spec.applications)} applications, "
              f"{len(spec.channels)} channels, {len(spec.stages)} stages)")
    return 0


def cmd_run(args) -> int:
    spec = load_workflow(args.spec)
    store = EventStore(_home(args))
    workdir = Path(args.workdir) if args.workdir else Path(args.spec).resolve().parent
    supervisor = RunSupervisor(spec, store, workdir=workdir,
                               auto_approve=args.auto_approve, run_id=args.run_id)
    server = None
    if args.serve:
        from .api import DashboardServer

        host, _, port = args.serve.rpartition(":")
        server = DashboardServer(store, host=host or "127.0.0.1",
                                 port=int(port) if port else 0).start()
        server.attach(supervisor)
        print(f"dashboard api at {server.url}", flush=True)
    try:
        terminal = supervisor.execute()
    finally:
        if server is not None and not args.keep_serving:
            server.stop()
    _print_record({
        "run_id": supervisor.run_id,
        "result": terminal,
        "reason": supervisor.terminal_reason,
        "events": store.last_seq(supervisor.run_id),
    })
    if server is not None and args.keep_serving:
        print("serving stored run; interrupt to exit", flush=True)
        try:
            import time as _t

            while True:
                _t.sleep(3600)
        except KeyboardInterrupt:
            server.stop()
    return TERMINAL_EXIT_CODES.get(terminal, 2)


def cmd_replay(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "events.ndj").exists():
        print(f"no events.ndj under {run_dir}", file=sys.stderr)
        return 1
    store = EventStore(run_dir.parent)
    run_id = run_dir.name
    try:
        store.load_run(run_id)
    except IntegrityError as exc:
        _print_record(exc.record())
        return 1
    meta = store.run_meta(run_id)
    if not meta.get("spec"):
        print("run meta lacks the spec snapshot; cannot replay", file=sys.stderr)
        return 1
    from .model import parse_workflow

    spec = parse_workflow(meta["spec"])
    events = store.query(Query(run_id=run_id))
    stored = stored_verdicts(events)
    replayed = replay_verdicts(events, spec)
    identical = stored == replayed
    for v in replayed:
        _print_record({"verdict": v})
    _print_record({
        "run_id": run_id,
        "stored_verdicts": len(stored),
        "replayed_verdicts": len(replayed),
        "identical": identical,
    })
    return 0 if identical else 1


def cmd_chaos(args) -> int:
    spec = load_workflow(args.spec)
    if args.gated:
        from .chaos import gated_trials

        summary = gated_trials(spec, Path(args.spec).resolve().parent,
                               p=args.p, trials=args.trials, seed=args.seed)
        _print_record(summary)
        return 0
    from .chaos import measure_failure_rate

    result = measure_failure_rate(spec, args.p, args.trials, args.seed)
    _print_record(result.record())
    if args.report:
        from .report import write_chaos_report

        for path in write_chaos_report(result, args.report):
            print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    store = EventStore(run_dir.parent)
    try:
        store.load_run(run_dir.name)
    except CopilotError as exc:
        _print_record(exc.record())
        return 1
    out = Path(args.out) if args.out else run_dir / "report"
    from .report import write_run_report

    for path in write_run_report(store, run_dir.name, out):
        print(f"wrote {path}")
    return 0


def cmd_fixtures(args) -> int:
    from .fixtures import materialize

    dest = Path(args.dest)
    workflow = materialize(args.name, dest)
    print(f"materialized {args.name} at {workflow}")
    return 0


def cmd_serve(args) -> int:
    from .api import DashboardServer

    store = EventStore(_home(args))
    for run_id in store.list_runs():
        try:
            store.load_run(run_id)
        except CopilotError as exc:
            log.warning("skipping run %s: %s", run_id, exc)
    host, _, port = args.addr.rpartition(":")
    server = DashboardServer(store, host=host or "127.0.0.1",
                             port=int(port) if port else 8761).start()
    print(f"dashboard api at {server.url} (runs: {len(store.list_runs())})", flush=True)
    try:
        import time as _t

        while True:
            _t.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="copilot",
                                     description="staged workflow deployment copilot")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse a workflow file and run its static checks")
    p.add_argument("spec")
    p.add_argument("--format", choices=("text", "record"), default="text")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute the staged deployment for a workflow")
    p.add_argument("spec")
    p.add_argument("--auto-approve", action="store_true",
                   help="grant manual gates automatically (headless runs)")
    p.add_argument("--serve", metavar="ADDR", default=None,
                   help="host:port for the dashboard API during the run")
    p.add_argument("--keep-serving", action="store_true",
                   help="keep the API up after the run ends")
    p.add_argument("--home", default=None, help="runs directory (default $COPILOT_HOME or ./runs)")
    p.add_argument("--workdir", default=None, help="workspace for commands and check targets")
    p.add_argument("--run-id", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-evaluate monitors over a stored run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("chaos", help="seeded fault-injection experiments")
    p.add_argument("--spec", required=True)
    p.add_argument("--p", type=float, required=True, help="per-component fault probability")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--gated", action="store_true",
                   help="run full staged pipelines and measure what the gates catch")
    p.add_argument("--report", default=None, metavar="DIR",
                   help="write summary CSV and figure here")
    p.set_defaults(func=cmd_chaos)

    p = sub.add_parser("report", help="render figures and CSV series for a stored run")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("fixtures", help="materialize a bundled example workspace")
    p.add_argument("name", choices=("usecase1", "usecase2"))
    p.add_argument("--dest", required=True)
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("serve", help="serve the dashboard API over stored runs")
    p.add_argument("--home", default=None)
    p.add_argument("--addr", default="127.0.0.1:8761")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except CopilotError as exc:
        _print_record(exc.record())
        return 1


if __name__ == "__main__":
    sys.exit(main())
