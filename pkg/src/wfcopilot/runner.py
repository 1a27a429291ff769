"""Run supervision: executes the staged deployment machine for one workflow.

One supervisor owns the run end to end: it opens the run in the store, reports
the start-of-run risk figure, walks the stage machine (checklist, single-node
verification, gated scaled/live execution), launches one companion process per
application, pumps the monitor evaluator, applies the halt-on-anomaly policy,
and arbitrates operator gate decisions and steering arriving from other
threads through an ordered inbox.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import socket
import socketserver
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from queue import Empty, Queue

from .errors import CopilotError, TransitionError
from .model import (
    StageSpec,
    WorkflowSpec,
    estimate_system_failure,
    reduce_to_single_node,
    serialize_workflow,
    validate_workflow,
)
from .monitors import MonitorEvaluator
from .stages import (
    CheckContext,
    GateDecision,
    StageRecorder,
    StageState,
    run_checks,
)
from .store import EventStore, Query
from .tracepoints import Collector
from .mocks import channel_addr_env

log = logging.getLogger(__name__)

TERMINAL_EXIT_CODES = {"passed": 0, "failed": 2, "aborted": 3}

_INBOX_POLL_S = 0.04
_COMPANION_STOP_GRACE_S = 6.0


class WrongStateError(CopilotError):
    code = "wrong-state"


class UnknownTargetError(CopilotError):
    code = "unknown-target"


def alloc_port(host: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def new_run_id(spec_name: str) -> str:
    return f"{spec_name}-{time.strftime('%Y%m%d%H%M%S')}-{os.urandom(3).hex()}"


# ---------------------------------------------------------------------------
# companion event ingest

class IngestServer:
    """Accepts newline-delimited event records from companion processes."""

    def __init__(self, store: EventStore, run_id: str, host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self.run_id = run_id
        self.active = 0
        self._lock = threading.Lock()
        ingest = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                with ingest._lock:
                    ingest.active += 1
                try:
                    for line in self.rfile:
                        ingest._ingest_line(line)
                finally:
                    with ingest._lock:
                        ingest.active -= 1

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True,
                                        name="event-ingest")

    def _ingest_line(self, line: bytes) -> None:
        if not line.strip():
            return
        try:
            rec = json.loads(line.decode("utf-8"))["event"]
            self.store.append(
                run_id=self.run_id,  # companions only ever feed their own run
                source=str(rec["source"]),
                kind=str(rec["kind"]),
                fields=rec.get("fields") or {},
                ts_wall=rec.get("ts"),
            )
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            log.warning("dropping malformed companion record: %s", exc)

    @property
    def addr_str(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "IngestServer":
        self._thread.start()
        return self

    def wait_idle(self, timeout: float = 5.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                if self.active == 0:
                    return True
            time.sleep(0.02)
        return False

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


# ---------------------------------------------------------------------------
# supervisor

@dataclass
class _Message:
    kind: str
    payload: dict
    reply: Queue


class RunSupervisor:
    """Owns the stage machine for one run; other threads talk through methods."""

    def __init__(self, spec: WorkflowSpec, store: EventStore, *,
                 run_id: str | None = None,
                 workdir: Path | str = ".",
                 auto_approve: bool = False,
                 fault_plan=None):
        validate_workflow(spec)
        self.spec = spec
        self.store = store
        self.run_id = run_id or new_run_id(spec.name)
        self.workdir = Path(workdir).resolve()
        self.auto_approve = auto_approve
        self.state = StageState(self.run_id, spec.stages[0].name)
        self.recorder = StageRecorder(store, self.run_id)
        self.inbox: Queue = Queue()
        self.terminal: str | None = None
        self.terminal_reason: str = ""
        self._halt_requested: str | None = None
        self._gates: dict[str, GateDecision] = {}
        self._steer_counter = 0
        self._steer_lock = threading.Lock()
        self._pids: dict[str, int] = {}
        self._companions: dict[str, subprocess.Popen] = {}
        self._collector: Collector | None = None
        self._ingest: IngestServer | None = None
        self._live = threading.Event()
        from .chaos import FaultInjector  # local import: chaos depends on runner types
        self.injector = FaultInjector(fault_plan, self) if fault_plan is not None else None

    # -- public control surface (thread-safe) --------------------------------

    def decide(self, stage: str, decision: str, decided_by: str = "operator",
               reason: str = "") -> GateDecision:
        """Record an operator gate decision; idempotent on exact repeats."""
        if decision not in ("proceed", "halt"):
            raise WrongStateError(f"unknown decision {decision!r}", decision=decision)
        if self.terminal is not None:
            prior = self._gates.get(stage)
            if prior is not None and prior.decision == decision:
                return prior
            raise WrongStateError(f"run already {self.terminal}", run_id=self.run_id)
        reply: Queue = Queue()
        self.inbox.put(_Message("decision", {
            "stage": stage, "decision": decision,
            "decided_by": decided_by, "reason": reason,
        }, reply))
        try:
            outcome = reply.get(timeout=10.0)
        except Empty:
            raise WrongStateError("run is not accepting decisions", run_id=self.run_id)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome

    def steer(self, target_app: str, verb: str, args: dict | None = None,
              issued_by: str = "operator") -> str:
        """Issue a steering command toward a live application; returns command_id."""
        try:
            self.spec.application(target_app)
        except KeyError:
            raise UnknownTargetError(f"no application {target_app!r}", app=target_app)
        if not self._live.is_set():
            raise WrongStateError("run has no live applications to steer", run_id=self.run_id)
        with self._steer_lock:
            self._steer_counter += 1
            command_id = f"steer-{self._steer_counter}"
        command = {"command_id": command_id, "verb": verb, "args": args or {}}
        self.store.append(self.run_id, "system", "steer_issue", {
            "command_id": command_id,
            "target_app": target_app,
            "verb": verb,
            "args": args or {},
            "issued_by": issued_by,
        })
        delivered = False
        if self._collector is not None:
            delivered = self._collector.send_steer(self.run_id, target_app, command)
        if not delivered:
            log.debug("steer %s: no live connection for %s (will time out)",
                      command_id, target_app)
        return command_id

    def snapshot(self) -> dict:
        """Stage machine view for the API; derived data comes from the store."""
        return {
            "run_id": self.run_id,
            "workflow": self.spec.name,
            "current_stage": self.state.current,
            "status": self.state.status,
            "terminal": self.terminal,
            "terminal_reason": self.terminal_reason,
            "check_results": [r.fields() for r in self.state.check_results],
            "gate": self.state.gate.fields() if self.state.gate else None,
            "stages": [
                {"name": s.name, "kind": s.kind, "approval": s.approval, "skip": s.skip}
                for s in self.spec.stages
            ],
        }

    # -- chaos hooks ----------------------------------------------------------

    def kill_app(self, app_name: str) -> bool:
        pid = self._pids.get(app_name)
        if pid is None:
            return False
        try:
            os.killpg(os.getpgid(pid), signal.SIGKILL)
            return True
        except (ProcessLookupError, PermissionError):
            return False

    def control_steer(self, app_name: str, verb: str, args: dict | None = None) -> str | None:
        try:
            return self.steer(app_name, verb, args, issued_by="chaos")
        except CopilotError:
            return None

    # -- execution ------------------------------------------------------------

    def execute(self) -> str:
        meta = {
            "run_id": self.run_id,
            "workflow": self.spec.name,
            "created_ms": int(time.time() * 1000),
            "workdir": str(self.workdir),
            "auto_approve": self.auto_approve,
            "spec": serialize_workflow(self.spec),
        }
        self.store.open_run(self.run_id, meta)
        self.recorder.reliability(self.spec)
        try:
            for i, stage in enumerate(self.spec.stages):
                if i > 0:
                    if not self._pass_gate(stage):
                        break
                if stage.skip:
                    self.store.append(self.run_id, "system", "stage", {
                        "stage": stage.name, "event": "skipped", "reason": "marked skip",
                    })
                    continue
                if not self._run_stage(stage, first=(i == 0)):
                    break
            else:
                self.terminal = "passed"
        finally:
            if self.terminal is None:
                self.terminal = "aborted" if self._halt_requested else "failed"
                if self._halt_requested:
                    self.terminal_reason = self._halt_requested
            self._teardown()
            self.store.append(self.run_id, "system", "stage", {
                "stage": "run", "event": "run_end",
                "result": self.terminal, "reason": self.terminal_reason,
            })
            self._drain_inbox_final()
        return self.terminal

    # -- gates ----------------------------------------------------------------

    def _pass_gate(self, stage: StageSpec) -> bool:
        """Green light between a passed stage and the next one."""
        if self._halt_requested:
            self.terminal = "aborted"
            self.terminal_reason = self._halt_requested
            return False
        if stage.approval == "automatic" or self.auto_approve or stage.skip:
            decision = GateDecision(
                decided_by="automatic",
                decision="proceed",
                at=int(time.time() * 1000),
                reason="auto-approve" if self.auto_approve else "automatic stage approval",
            )
            self._gates[stage.name] = decision
            self.state.gate = decision
            self.recorder.gate(stage.name, decision)
            return True
        # manual gate: hold in awaiting_approval until an operator decides
        self.state.current = stage.name
        self.recorder.transition(self.state, "awaiting_approval",
                                 reason=f"manual approval required for {stage.name}")
        while True:
            self._drain_inbox(timeout=_INBOX_POLL_S)
            gate = self._gates.get(stage.name)
            if gate is not None:
                if gate.decision == "proceed":
                    return True
                self.recorder.transition(self.state, "aborted", reason=gate.reason or "operator halt")
                self.terminal = "aborted"
                self.terminal_reason = gate.reason or "operator halt"
                return False
            if self._halt_requested:
                self.recorder.transition(self.state, "aborted", reason=self._halt_requested)
                self.terminal = "aborted"
                self.terminal_reason = self._halt_requested
                return False

    # -- stages -----------------------------------------------------------------

    def _run_stage(self, stage: StageSpec, first: bool) -> bool:
        if first:
            self.recorder.transition(self.state, "checking")
            if self.injector is not None:
                self.injector.apply_static(stage)
            results = run_checks(stage, self.spec, CheckContext(self.workdir),
                                 self.store, self.run_id)
            self.state.check_results = results
            failed = [r for r in results if r.outcome == "fail"]
            if failed:
                reason = f"{len(failed)} check(s) failed: " + ", ".join(r.check_id for r in failed)
                self.recorder.transition(self.state, "failed", reason=reason)
                self.terminal = "failed"
                self.terminal_reason = reason
                return False
            self.recorder.transition(self.state, "passed",
                                     reason=f"{len(results)} check(s) passed")
            return True

        # execution stage: enter running unless the operator proceed already did
        if self.state.status != "running":
            self.state.current = stage.name
            self.recorder.transition(self.state, "running", reason=f"entering {stage.kind}")
        if stage.checks:
            results = run_checks(stage, self.spec, CheckContext(self.workdir),
                                 self.store, self.run_id)
            self.state.check_results = results
            failed = [r for r in results if r.outcome == "fail"]
            if failed:
                reason = "stage checks failed: " + ", ".join(r.check_id for r in failed)
                self.recorder.transition(self.state, "failed", reason=reason)
                self.terminal = "failed"
                self.terminal_reason = reason
                return False

        variant = reduce_to_single_node(self.spec) if stage.kind == "single-node" else self.spec
        live_policy = stage.kind in ("scaled", "live")
        ok, reason = self._supervise_processes(stage, variant, live_policy)
        if self._halt_requested:
            self.recorder.transition(self.state, "aborted", reason=self._halt_requested)
            self.terminal = "aborted"
            self.terminal_reason = self._halt_requested
            return False
        if ok:
            self.recorder.transition(self.state, "passed", reason=reason)
            return True
        self.recorder.transition(self.state, "failed", reason=reason)
        self.terminal = "failed"
        self.terminal_reason = reason
        return False

    def _supervise_processes(self, stage: StageSpec, spec: WorkflowSpec,
                             live_policy: bool) -> tuple[bool, str]:
        """Launch all applications under companions and watch until done."""
        run_dir = self.store.run_dir(self.run_id) or (self.workdir / "run-scratch" / self.run_id)
        run_dir.mkdir(parents=True, exist_ok=True)
        spec_path = run_dir / f"spec-{stage.name}.yaml"
        spec_path.write_text(serialize_workflow(spec), encoding="utf-8")

        base_seq = self.store.last_seq(self.run_id)
        self._collector = Collector(self.store).start()
        self._ingest = IngestServer(self.store, self.run_id).start()

        channel_env = {}
        for ch in spec.channels:
            if ch.kind == "steering":
                continue
            channel_env[channel_addr_env(ch.name)] = f"127.0.0.1:{alloc_port()}"

        origin = time.monotonic_ns()
        evaluator = MonitorEvaluator(self.store, spec, self.run_id, stage.name, origin)
        evaluator.start()

        if self.injector is not None:
            self.injector.arm_stage(stage)

        try:
            for app in spec.applications:
                env = dict(os.environ)
                env.update(channel_env)
                env["COPILOT_TRACE_ADDR"] = self._collector.addr_str
                env["COPILOT_NODES"] = str(app.nodes)
                logfile = open(run_dir / f"companion-{app.name}.log", "ab")
                proc = subprocess.Popen(
                    [sys.executable, "-m", "wfcopilot.companion",
                     "--app", app.name, "--run", self.run_id,
                     "--spec", str(spec_path), "--store", self._ingest.addr_str,
                     "--workdir", str(self.workdir), "--capture-dir", str(run_dir)],
                    env=env, cwd=str(self.workdir),
                    stdout=logfile, stderr=logfile,
                )
                logfile.close()
                self._companions[app.name] = proc
            self._live.set()
            return self._watch(stage, spec, live_policy, base_seq, evaluator)
        finally:
            self._live.clear()
            if self.injector is not None:
                self.injector.disarm()
            self._stop_companions()
            if self._ingest.wait_idle(timeout=5.0) is False:
                log.warning("companion streams still active at stage teardown")
            self._collector.stop()
            self._ingest.stop()
            # all sources are down; wait for in-flight appends to settle so the
            # final virtual tick provably covers every stored event
            self._settle_store(quiet_s=max(0.15, 1.5 * self.spec.run_defaults.tick_ms / 1000.0))
            evaluator.finalize()
            self._pids.clear()
            self._companions.clear()
            self._collector = None
            self._ingest = None

    def _watch(self, stage: StageSpec, spec: WorkflowSpec, live_policy: bool,
               base_seq: int, evaluator: MonitorEvaluator) -> tuple[bool, str]:
        deadline = time.monotonic() + stage.timeout_ms / 1000.0
        app_names = [a.name for a in spec.applications]
        critical = {a.name for a in spec.applications if a.critical}
        pinged = False

        while True:
            self._drain_inbox(timeout=_INBOX_POLL_S)
            if self._halt_requested:
                return False, self._halt_requested
            evaluator.process_until(time.monotonic_ns())

            events = self.store.query(Query(run_id=self.run_id, seq_after=base_seq))
            exits: dict[str, dict] = {}
            failed_launches: list[str] = []
            stalled: list[str] = []
            for ev in events:
                if ev.kind == "exit" and ev.source in app_names and ev.source not in exits:
                    exits[ev.source] = ev.fields
                elif ev.kind == "launch_failed" and ev.source in app_names:
                    failed_launches.append(ev.source)
                elif ev.kind == "launched" and ev.source in app_names:
                    self._pids.setdefault(ev.source, ev.fields.get("pid"))
                elif ev.kind == "verdict" and ev.fields.get("status") == "stalled":
                    subject = ev.fields.get("subject")
                    if ev.fields.get("subject_kind") == "app" and subject not in critical:
                        continue
                    stalled.append(f"{ev.fields.get('subject_kind')} {subject}")

            if failed_launches:
                return False, "launch failed: " + ", ".join(sorted(set(failed_launches)))

            for app_name, proc in self._companions.items():
                rc = proc.poll()
                if rc not in (None, 0) and app_name not in exits:
                    return False, f"companion for {app_name} died (rc {rc}) without reporting"

            if not pinged and self._collector is not None:
                # exercise every steering channel once all owners are connected
                steering_owners = {c.to_app for c in spec.channels if c.kind == "steering"}
                connected = set(self._collector.connected_apps(self.run_id))
                if steering_owners and steering_owners <= connected:
                    for owner in sorted(steering_owners):
                        self.control_steer(owner, "_ping")
                    pinged = True
                elif not steering_owners:
                    pinged = True

            if stalled:
                self._stop_companions()
                return False, "stalled: " + ", ".join(sorted(set(stalled)))

            if len(exits) == len(app_names):
                bad = {
                    name: f
                    for name, f in exits.items()
                    if f.get("classified") != "success" and name in critical
                }
                if bad:
                    detail = ", ".join(
                        f"{name} ({f.get('classified')}"
                        + (f" code {f.get('exit_code')}" if f.get("exit_code") is not None else "")
                        + ")"
                        for name, f in sorted(bad.items())
                    )
                    return False, f"component failures: {detail}"
                if not live_policy:
                    silent = self._silent_channels(spec, base_seq)
                    if silent:
                        return False, "channel-silent: " + ", ".join(silent)
                return True, f"all {len(app_names)} application(s) exited clean"

            if live_policy and exits:
                bad = {n: f for n, f in exits.items()
                       if f.get("classified") != "success" and n in critical}
                if bad:
                    name, f = next(iter(sorted(bad.items())))
                    self._stop_companions()
                    return False, f"halted: {name} {f.get('classified')}" + (
                        f" code {f.get('exit_code')}" if f.get("exit_code") is not None else "")

            if time.monotonic() > deadline:
                self._stop_companions()
                return False, f"timeout after {stage.timeout_ms} ms"

    def _silent_channels(self, spec: WorkflowSpec, base_seq: int) -> list[str]:
        exercised = set()
        for ev in self.store.query(Query(run_id=self.run_id, kinds=frozenset({"io_stat"}),
                                         seq_after=base_seq)):
            exercised.add(ev.fields.get("channel"))
        return sorted(c.name for c in spec.channels if c.name not in exercised)

    # -- teardown / inbox ------------------------------------------------------

    def _settle_store(self, quiet_s: float, timeout_s: float = 3.0) -> None:
        deadline = time.monotonic() + timeout_s
        last = self.store.last_seq(self.run_id)
        quiet_since = time.monotonic()
        while time.monotonic() < deadline:
            time.sleep(0.03)
            cur = self.store.last_seq(self.run_id)
            if cur != last:
                last = cur
                quiet_since = time.monotonic()
            elif time.monotonic() - quiet_since >= quiet_s:
                return

    def _stop_companions(self) -> None:
        alive = [p for p in self._companions.values() if p.poll() is None]
        for proc in alive:
            try:
                proc.send_signal(signal.SIGTERM)
            except (ProcessLookupError, PermissionError):
                pass
        deadline = time.monotonic() + _COMPANION_STOP_GRACE_S
        for proc in alive:
            remaining = max(0.05, deadline - time.monotonic())
            try:
                proc.wait(timeout=remaining)
            except subprocess.TimeoutExpired:
                proc.kill()
                try:
                    proc.wait(timeout=2.0)
                except subprocess.TimeoutExpired:
                    pass
        if alive:
            # belt and braces: reap any application group a companion left behind
            for pid in self._pids.values():
                if pid is None:
                    continue
                try:
                    os.killpg(os.getpgid(pid), signal.SIGKILL)
                except (ProcessLookupError, PermissionError):
                    pass

    def _teardown(self) -> None:
        self._stop_companions()
        self._companions.clear()

    def _drain_inbox(self, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            try:
                msg = self.inbox.get(timeout=max(0.0, remaining))
            except Empty:
                return
            self._handle(msg)
            if time.monotonic() >= deadline:
                return

    def _drain_inbox_final(self) -> None:
        while True:
            try:
                msg = self.inbox.get_nowait()
            except Empty:
                return
            self._handle(msg)

    def _handle(self, msg: _Message) -> None:
        if msg.kind != "decision":
            msg.reply.put(WrongStateError(f"unknown message {msg.kind!r}"))
            return
        p = msg.payload
        stage_name = p["stage"]
        prior = self._gates.get(stage_name)
        if prior is not None:
            if prior.decision == p["decision"]:
                msg.reply.put(prior)  # idempotent repeat: one transition happened
            else:
                if p["decision"] == "halt":
                    self._halt_requested = p.get("reason") or "operator halt"
                    decision = GateDecision("operator", "halt", int(time.time() * 1000),
                                            self._halt_requested)
                    self.recorder.gate(stage_name, decision)
                    msg.reply.put(decision)
                else:
                    msg.reply.put(WrongStateError(
                        f"stage {stage_name!r} already decided {prior.decision}",
                        stage=stage_name))
            return
        try:
            stage = self.spec.stage(stage_name)
        except KeyError:
            msg.reply.put(UnknownTargetError(f"no stage {stage_name!r}", stage=stage_name))
            return
        decision = GateDecision(
            decided_by=p.get("decided_by") or "operator",
            decision=p["decision"],
            at=int(time.time() * 1000),
            reason=p.get("reason", ""),
        )
        if p["decision"] == "halt":
            self._halt_requested = decision.reason or "operator halt"
            self._gates[stage.name] = decision
            self.state.gate = decision
            self.recorder.gate(stage.name, decision)
            msg.reply.put(decision)
            return
        # proceed is only meaningful while that stage's gate is being awaited
        if not (self.state.status == "awaiting_approval" and self.state.current == stage.name):
            msg.reply.put(WrongStateError(
                f"stage {stage_name!r} is not awaiting approval "
                f"(run is {self.state.status} at {self.state.current!r})",
                stage=stage_name, status=self.state.status))
            return
        self._gates[stage.name] = decision
        self.state.gate = decision
        self.recorder.gate(stage.name, decision)
        self.recorder.transition(self.state, "running", reason="operator proceed")
        msg.reply.put(decision)
