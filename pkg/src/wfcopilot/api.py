"""Operator HTTP surface: run/stage inspection, event pages, live event stream,
gate decisions and steering ingestion.

Every GET is a pure view over the store (completed runs work without their
supervisor); every mutation goes through the owning run's supervisor and lands
in the store as an event. Server-push uses server-sent-event framing over
plain HTTP/1.1 so any HTTP client can consume it.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .errors import CopilotError, UnknownRunError
from .monitors import steering_records
from .runner import RunSupervisor, UnknownTargetError, WrongStateError
from .store import EventStore, Query

log = logging.getLogger(__name__)

STREAM_KEEPALIVE_S = 5.0
DEFAULT_PAGE_LIMIT = 1000


def derive_run_summary(store: EventStore, run_id: str) -> dict:
    """Rebuild the operator view of a run purely from its stored events."""
    events = store.query(Query(run_id=run_id))
    if not events:
        raise UnknownRunError(f"unknown run {run_id!r}", run_id=run_id)
    meta = store.run_meta(run_id)
    summary: dict = {
        "run_id": run_id,
        "workflow": meta.get("workflow"),
        "created_ms": meta.get("created_ms"),
        "current_stage": None,
        "status": "pending",
        "terminal": None,
        "terminal_reason": "",
        "reliability": None,
        "check_results": [],
        "gates": {},
        "exit_reports": {},
        "latest_verdicts": {},
        "last_seq": events[-1].store_seq,
    }
    checks_by_stage: dict[str, list[dict]] = {}
    for ev in events:
        f = ev.fields
        if ev.kind == "stage":
            event_name = f.get("event")
            if event_name == "reliability":
                summary["reliability"] = {
                    "component_probabilities": f.get("component_probabilities"),
                    "system_failure_probability": f.get("system_failure_probability"),
                }
            elif event_name == "gate":
                summary["gates"][f.get("stage")] = {
                    "decided_by": f.get("decided_by"),
                    "decision": f.get("decision"),
                    "at": f.get("at"),
                    "reason": f.get("reason"),
                }
            elif event_name == "check":
                checks_by_stage.setdefault(f.get("stage"), []).append({
                    "check_id": f.get("check_id"),
                    "outcome": f.get("outcome"),
                    "detail": f.get("detail"),
                    "duration_ms": f.get("duration_ms"),
                })
            elif event_name == "run_end":
                summary["terminal"] = f.get("result")
                summary["terminal_reason"] = f.get("reason", "")
            elif "to_status" in f:
                summary["current_stage"] = f.get("stage")
                summary["status"] = f.get("to_status")
        elif ev.kind == "exit":
            summary["exit_reports"].setdefault(ev.source, {
                "exit_code": f.get("exit_code"),
                "signal": f.get("signal"),
                "classified": f.get("classified"),
                "wall_duration_ms": f.get("wall_duration_ms"),
                "peak_rss_bytes": f.get("peak_rss_bytes"),
            })
        elif ev.kind == "verdict" and f.get("subject") is not None:
            summary["latest_verdicts"][f"{f.get('subject_kind')}:{f.get('subject')}"] = {
                "subject_kind": f.get("subject_kind"),
                "subject": f.get("subject"),
                "status": f.get("status"),
                "since": f.get("since"),
                "seq": ev.store_seq,
            }
    summary["check_results"] = checks_by_stage.get(summary["current_stage"], [])
    summary["checks_by_stage"] = checks_by_stage
    return summary


class DashboardServer:
    """HTTP server bound to one store plus the supervisors of live runs."""

    def __init__(self, store: EventStore, host: str = "127.0.0.1", port: int = 0,
                 token: str | None = None):
        self.store = store
        self.token = token if token is not None else os.environ.get("COPILOT_API_TOKEN")
        self._supervisors: dict[str, RunSupervisor] = {}
        self._lock = threading.Lock()
        server = self

        class Handler(_Handler):
            api = server

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True,
                                        name="dashboard-api")

    @property
    def addr(self) -> tuple[str, int]:
        return self._httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.addr
        return f"http://{host}:{port}"

    def attach(self, supervisor: RunSupervisor) -> None:
        with self._lock:
            self._supervisors[supervisor.run_id] = supervisor

    def supervisor(self, run_id: str) -> RunSupervisor | None:
        with self._lock:
            return self._supervisors.get(run_id)

    def start(self) -> "DashboardServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


class _Handler(BaseHTTPRequestHandler):
    api: DashboardServer
    protocol_version = "HTTP/1.1"

    # route table: (method, compiled pattern) -> handler name
    ROUTES = [
        ("GET", re.compile(r"^/runs$"), "handle_list_runs"),
        ("GET", re.compile(r"^/runs/(?P<run>[^/]+)$"), "handle_run"),
        ("GET", re.compile(r"^/runs/(?P<run>[^/]+)/events$"), "handle_events"),
        ("GET", re.compile(r"^/runs/(?P<run>[^/]+)/stream$"), "handle_stream"),
        ("POST", re.compile(r"^/runs/(?P<run>[^/]+)/stages/(?P<stage>[^/]+)/decision$"),
         "handle_decision"),
        ("POST", re.compile(r"^/runs/(?P<run>[^/]+)/steer$"), "handle_steer"),
    ]

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("api: " + fmt, *args)

    # -- plumbing -------------------------------------------------------------

    def _send_json(self, status: int, payload: dict | list) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, code: str, message: str, **extra) -> None:
        payload = {"error": code, "message": message}
        payload.update(extra)
        self._send_json(status, payload)

    def _authorized(self) -> bool:
        if not self.api.token:
            return True
        header = self.headers.get("Authorization", "")
        return header == f"Bearer {self.api.token}"

    def _dispatch(self, method: str) -> None:
        parsed = urlparse(self.path)
        if not self._authorized():
            self._error(401, "unauthorized", "missing or wrong bearer token")
            return
        for verb, pattern, name in self.ROUTES:
            if verb != method:
                continue
            m = pattern.match(parsed.path)
            if m:
                try:
                    getattr(self, name)(parse_qs(parsed.query), **m.groupdict())
                except BrokenPipeError:
                    pass
                except CopilotError as exc:
                    self._error(500, exc.code, str(exc))
                except Exception as exc:  # pragma: no cover - last resort
                    log.exception("api handler failed")
                    self._error(500, "internal", str(exc))
                return
        self._error(404, "not-found", f"no route for {method} {parsed.path}")

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        raw = self.rfile.read(length)
        try:
            return json.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            raise CopilotError("request body is not JSON")

    # -- GET ---------------------------------------------------------------------

    def handle_list_runs(self, params) -> None:
        out = []
        for run_id in self.api.store.list_runs():
            try:
                s = derive_run_summary(self.api.store, run_id)
            except UnknownRunError:
                continue
            out.append({
                "run_id": run_id,
                "workflow": s.get("workflow"),
                "current_stage": s.get("current_stage"),
                "status": s.get("status"),
                "terminal": s.get("terminal"),
            })
        self._send_json(200, {"runs": out})

    def handle_run(self, params, run: str) -> None:
        try:
            summary = derive_run_summary(self.api.store, run)
        except UnknownRunError:
            self._error(404, "unknown-run", f"no run {run!r}")
            return
        summary["steering"] = [
            {
                "command_id": r.command_id,
                "status": r.status,
                "latency_ms": r.latency_ms,
                "duplicate_acks": r.duplicate_acks,
            }
            for r in self._steering(run)
        ]
        self._send_json(200, summary)

    def _steering(self, run: str):
        events = self.api.store.query(
            Query(run_id=run, kinds=frozenset({"steer_issue", "steer_ack"})))
        sup = self.api.supervisor(run)
        timeout = sup.spec.run_defaults.steer_timeout_ms if sup else 1000
        import time as _time
        return steering_records(events, timeout, _time.monotonic_ns())

    def _parse_query(self, params, run: str) -> Query:
        def one(name, conv=int):
            values = params.get(name)
            if not values:
                return None
            try:
                return conv(values[0])
            except ValueError:
                raise _BadParam(name)

        kinds = params.get("kinds")
        sources = params.get("sources")
        return Query(
            run_id=run,
            kinds=frozenset(kinds[0].split(",")) if kinds else None,
            sources=frozenset(sources[0].split(",")) if sources else None,
            t0=one("t0"),
            t1=one("t1"),
            seq_after=one("seq_after"),
            limit=one("limit"),
        )

    def handle_events(self, params, run: str) -> None:
        try:
            q = self._parse_query(params, run)
        except _BadParam as exc:
            self._error(400, "bad-param", f"malformed query parameter {exc.name!r}",
                        parameter=exc.name)
            return
        except ValueError as exc:
            self._error(400, "bad-param", str(exc), parameter="t0")
            return
        if q.limit is None:
            q = Query(q.run_id, q.sources, q.kinds, q.t0, q.t1, q.seq_after, DEFAULT_PAGE_LIMIT)
        events = self.api.store.query(q)
        self._send_json(200, {
            "events": [ev.record() for ev in events],
            "last_seq": events[-1].store_seq if events else (q.seq_after or 0),
        })

    def handle_stream(self, params, run: str) -> None:
        try:
            q = self._parse_query(params, run)
        except _BadParam as exc:
            self._error(400, "bad-param", f"malformed query parameter {exc.name!r}",
                        parameter=exc.name)
            return
        if q.t0 is not None or q.t1 is not None:
            self._error(400, "bad-param", "stream does not take time bounds", parameter="t0")
            return
        sub = self.api.store.subscribe(q)
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        try:
            while True:
                ev = sub.get(timeout=STREAM_KEEPALIVE_S)
                if ev is None:
                    if sub.closed:
                        if sub.overflowed:
                            self.wfile.write(b"event: overflow\ndata: {}\n\n")
                        return
                    self.wfile.write(b": keepalive\n\n")
                    self.wfile.flush()
                    continue
                frame = f"id: {ev.store_seq}\ndata: {json.dumps(ev.record())}\n\n"
                self.wfile.write(frame.encode("utf-8"))
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            self.api.store.unsubscribe(sub)

    # -- POST --------------------------------------------------------------------

    def handle_decision(self, params, run: str, stage: str) -> None:
        sup = self.api.supervisor(run)
        if sup is None:
            self._error(404, "unknown-run", f"no live run {run!r}")
            return
        body = self._read_body()
        decision = body.get("decision")
        if decision not in ("proceed", "halt"):
            self._error(400, "bad-param", "decision must be proceed or halt",
                        parameter="decision")
            return
        try:
            gate = sup.decide(stage, decision,
                              decided_by=body.get("decided_by", "operator"),
                              reason=body.get("reason", ""))
        except UnknownTargetError as exc:
            self._error(404, exc.code, str(exc))
            return
        except WrongStateError as exc:
            self._error(409, exc.code, str(exc))
            return
        self._send_json(200, {"stage": stage, **gate.fields()})

    def handle_steer(self, params, run: str) -> None:
        sup = self.api.supervisor(run)
        if sup is None:
            self._error(404, "unknown-run", f"no live run {run!r}")
            return
        body = self._read_body()
        target = body.get("target_app")
        verb = body.get("verb")
        if not target or not verb:
            self._error(400, "bad-param", "target_app and verb are required",
                        parameter="target_app" if not target else "verb")
            return
        try:
            command_id = sup.steer(target, verb, body.get("args") or {},
                                   issued_by=body.get("issued_by", "operator"))
        except UnknownTargetError as exc:
            self._error(404, exc.code, str(exc))
            return
        except WrongStateError as exc:
            self._error(409, exc.code, str(exc))
            return
        self._send_json(200, {
            "command_id": command_id,
            "target_app": target,
            "verb": verb,
            "args": body.get("args") or {},
            "issued_by": body.get("issued_by", "operator"),
        })


class _BadParam(Exception):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name
