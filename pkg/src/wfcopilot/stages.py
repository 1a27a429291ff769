"""Staged deployment state machine, checklist execution and gate decisions.

The machine accepts exactly:
pending -> checking -> (passed|failed), passed -> [awaiting_approval] ->
running -> (passed|failed|aborted); failed and aborted are terminal for the
run. Every transition and gate decision is appended to the store as a stage
event so the whole deployment is auditable from the log alone.
"""

from __future__ import annotations

import os
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import TransitionError
from .model import CheckSpec, StageSpec, WorkflowSpec, estimate_system_failure
from .store import EventStore

STATUSES = ("pending", "checking", "awaiting_approval", "running", "passed", "failed", "aborted")

_ALLOWED = {
    "pending": {"checking"},
    "checking": {"passed", "failed"},
    "passed": {"awaiting_approval", "running"},
    "awaiting_approval": {"running", "aborted"},
    "running": {"passed", "failed", "aborted"},
    "failed": set(),
    "aborted": set(),
}

TERMINAL = ("failed", "aborted")


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    outcome: str  # pass | fail
    detail: str
    duration_ms: float

    def fields(self) -> dict:
        return {
            "check_id": self.check_id,
            "outcome": self.outcome,
            "detail": self.detail,
            "duration_ms": self.duration_ms,
        }


@dataclass(frozen=True)
class GateDecision:
    decided_by: str  # automatic | operator
    decision: str  # proceed | halt
    at: int  # UTC ms
    reason: str

    def fields(self) -> dict:
        return {
            "decided_by": self.decided_by,
            "decision": self.decision,
            "at": self.at,
            "reason": self.reason,
        }


@dataclass
class StageState:
    """The run's position in the deployment machine."""

    run_id: str
    current: str
    status: str = "pending"
    check_results: list[CheckResult] = field(default_factory=list)
    gate: GateDecision | None = None

    def can(self, to_status: str) -> bool:
        return to_status in _ALLOWED.get(self.status, set())

    def transition(self, to_status: str) -> None:
        if to_status not in STATUSES:
            raise TransitionError(f"unknown status {to_status!r}", to=to_status)
        if not self.can(to_status):
            raise TransitionError(
                f"illegal transition {self.status} -> {to_status} in stage {self.current!r}",
                from_status=self.status,
                to=to_status,
                stage=self.current,
            )
        self.status = to_status

    def enter_stage(self, name: str) -> None:
        if self.status != "passed":
            raise TransitionError(
                f"cannot enter {name!r}: current stage {self.current!r} is {self.status}, not passed",
                from_status=self.status,
                stage=self.current,
            )
        self.current = name
        self.status = "pending"
        self.check_results = []
        self.gate = None


class StageRecorder:
    """Appends machine-readable stage events alongside state transitions."""

    def __init__(self, store: EventStore, run_id: str):
        self.store = store
        self.run_id = run_id

    def transition(self, state: StageState, to_status: str, reason: str = "") -> None:
        from_status = state.status
        state.transition(to_status)
        self.store.append(self.run_id, "system", "stage", {
            "stage": state.current,
            "from_status": from_status,
            "to_status": to_status,
            "reason": reason,
        })

    def gate(self, stage: str, decision: GateDecision) -> None:
        fields = {"stage": stage, "event": "gate"}
        fields.update(decision.fields())
        self.store.append(self.run_id, "system", "stage", fields)

    def reliability(self, spec: WorkflowSpec) -> None:
        """Run-start risk figure over the declared per-application priors."""
        est = estimate_system_failure(a.failure_probability for a in spec.applications)
        self.store.append(self.run_id, "system", "stage", {
            "stage": "run",
            "event": "reliability",
            "component_probabilities": list(est.component_probabilities),
            "system_failure_probability": est.system_failure_probability,
            "applications": [a.name for a in spec.applications],
        })


# ---------------------------------------------------------------------------
# checklist execution

@dataclass(frozen=True)
class CheckContext:
    workdir: Path
    env: dict | None = None

    def resolve(self, target: str) -> Path:
        p = Path(target)
        return p if p.is_absolute() else self.workdir / p

    def environ(self) -> dict:
        return self.env if self.env is not None else dict(os.environ)


def run_check(check: CheckSpec, ctx: CheckContext) -> CheckResult:
    t0 = time.monotonic()
    try:
        ok, detail = _CHECKERS[check.kind](check.target, ctx)
    except Exception as exc:  # cannot even attempt: recorded, never raised
        ok, detail = False, f"check execution error: {exc}"
    return CheckResult(
        check_id=check.id,
        outcome="pass" if ok else "fail",
        detail=detail,
        duration_ms=(time.monotonic() - t0) * 1000.0,
    )


def run_checks(stage: StageSpec, spec: WorkflowSpec, ctx: CheckContext,
               store: EventStore | None = None, run_id: str | None = None) -> list[CheckResult]:
    """One result per declared check, each also appended as a stage event."""
    results = []
    for check in stage.checks:
        result = run_check(check, ctx)
        results.append(result)
        if store is not None and run_id is not None:
            fields = {"stage": stage.name, "event": "check"}
            fields.update(result.fields())
            store.append(run_id, "system", "stage", fields)
    return results


def _check_executable_exists(target: str, ctx: CheckContext) -> tuple[bool, str]:
    p = ctx.resolve(target)
    if p.exists():
        if os.access(p, os.X_OK):
            return True, f"{p} is executable"
        return False, f"{p} exists but is not executable"
    import shutil
    found = shutil.which(target, path=ctx.environ().get("PATH"))
    if found:
        return True, f"{target} found on PATH at {found}"
    return False, f"{target} not found (not a file, not on PATH)"


def _check_path_readable(target: str, ctx: CheckContext) -> tuple[bool, str]:
    p = ctx.resolve(target)
    if not p.exists():
        return False, f"{p} does not exist"
    if os.access(p, os.R_OK):
        return True, f"{p} is readable"
    return False, f"{p} is not readable"


def _check_path_writable(target: str, ctx: CheckContext) -> tuple[bool, str]:
    p = ctx.resolve(target)
    probe = p if p.exists() else p.parent
    if not probe.exists():
        return False, f"{probe} does not exist"
    if os.access(probe, os.W_OK):
        return True, f"{probe} is writable"
    return False, f"{probe} is not writable"


def _check_env_var_set(target: str, ctx: CheckContext) -> tuple[bool, str]:
    if ctx.environ().get(target):
        return True, f"${target} is set"
    return False, f"${target} is not set"


def _check_config_parses(target: str, ctx: CheckContext) -> tuple[bool, str]:
    p = ctx.resolve(target)
    if not p.exists():
        return False, f"{p} does not exist"
    try:
        with open(p, "r", encoding="utf-8") as fh:
            yaml.safe_load(fh.read())
        return True, f"{p} parses"
    except (yaml.YAMLError, UnicodeDecodeError) as exc:
        return False, f"{p} does not parse: {exc}"


def _split_hostport(target: str) -> tuple[str, int]:
    host, _, port = target.rpartition(":")
    return host or "127.0.0.1", int(port)


def _check_port_free(target: str, ctx: CheckContext) -> tuple[bool, str]:
    host, port = _split_hostport(target)
    try:
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind((host, port))
        return True, f"{host}:{port} is free"
    except OSError as exc:
        return False, f"{host}:{port} is not bindable: {exc}"


def _check_channel_connectable(target: str, ctx: CheckContext) -> tuple[bool, str]:
    host, port = _split_hostport(target)
    try:
        with socket.create_connection((host, port), timeout=2.0):
            return True, f"{host}:{port} accepts connections"
    except OSError as exc:
        return False, f"{host}:{port} not connectable: {exc}"


def _check_library_resolvable(target: str, ctx: CheckContext) -> tuple[bool, str]:
    # Approximation: the declared library file exists and is readable.
    return _check_path_readable(target, ctx)


_CHECKERS = {
    "executable-exists": _check_executable_exists,
    "path-readable": _check_path_readable,
    "path-writable": _check_path_writable,
    "env-var-set": _check_env_var_set,
    "config-parses": _check_config_parses,
    "port-free": _check_port_free,
    "channel-connectable": _check_channel_connectable,
    "library-resolvable": _check_library_resolvable,
}
