"""Declarative workflow description: parsing, validation, canonical serialization.

Also houses the independent-component failure model used for run-start risk
reporting, and the single-node reduction transform that produces the desk-scale
verification variant of a workflow.
"""

from __future__ import annotations

import math
import re
import shlex
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import yaml

from .errors import (
    DanglingEndpointError,
    DomainError,
    DuplicateNameError,
    SpecSchemaError,
    SpecSyntaxError,
)

STAGE_KINDS = ("static-check", "single-node", "scaled", "live")
CHANNEL_KINDS = ("steering", "bulk_data", "raw_output", "visualization", "time_critical")
CHECK_KINDS = (
    "executable-exists",
    "path-readable",
    "path-writable",
    "env-var-set",
    "config-parses",
    "port-free",
    "channel-connectable",
    "library-resolvable",
)
APPROVAL_MODES = ("automatic", "manual")

# Required stage-kind backbone, in order, for a full workflow document.
PIPELINE_KINDS = ("static-check", "single-node", "scaled")

_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")

DEFAULT_STAGE_TIMEOUTS_MS = {
    "static-check": 30_000,
    "single-node": 120_000,
    "scaled": 300_000,
    "live": 600_000,
}


@dataclass(frozen=True)
class RunPolicy:
    """Per-run tunables applied to every application unless overridden."""

    grace_multiplier: float = 2.0
    tick_ms: int = 100
    sample_interval_ms: int = 250
    steer_timeout_ms: int = 1000
    throughput_window_ms: int = 1000
    # startup allowance before a silent channel counts as stalled; stall
    # timeouts apply strictly once traffic has been seen
    channel_startup_grace_ms: int = 5000


@dataclass(frozen=True)
class ApplicationSpec:
    name: str
    command: tuple[str, ...]
    env: dict[str, str] = field(default_factory=dict)
    nodes: int = 1
    heartbeat_interval_ms: int | None = None
    failure_probability: float = 0.0
    scale_factor: float = 1.0
    log_paths: tuple[str, ...] = ()
    log_pattern: str | None = None
    critical: bool = True


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    from_app: str
    to_app: str
    kind: str
    stall_timeout_ms: int = 2000


@dataclass(frozen=True)
class CheckSpec:
    id: str
    kind: str
    target: str


@dataclass(frozen=True)
class StageSpec:
    name: str
    kind: str
    checks: tuple[CheckSpec, ...] = ()
    approval: str = "automatic"
    timeout_ms: int = 30_000
    skip: bool = False


@dataclass(frozen=True)
class WorkflowSpec:
    name: str
    run_defaults: RunPolicy
    applications: tuple[ApplicationSpec, ...]
    channels: tuple[ChannelSpec, ...]
    stages: tuple[StageSpec, ...]

    def application(self, name: str) -> ApplicationSpec:
        for app in self.applications:
            if app.name == name:
                return app
        raise KeyError(name)

    def channel(self, name: str) -> ChannelSpec:
        for ch in self.channels:
            if ch.name == name:
                return ch
        raise KeyError(name)

    def stage(self, name: str) -> StageSpec:
        for st in self.stages:
            if st.name == name:
                return st
        raise KeyError(name)


@dataclass(frozen=True)
class ReliabilityEstimate:
    """Workflow-level failure probability assuming independent component failures."""

    component_probabilities: tuple[float, ...]
    system_failure_probability: float


def default_stages() -> tuple[StageSpec, ...]:
    """The minimal legal pipeline, used when a document omits ``stages``."""
    return (
        StageSpec("static", "static-check", (), "automatic", DEFAULT_STAGE_TIMEOUTS_MS["static-check"]),
        StageSpec("single-node", "single-node", (), "automatic", DEFAULT_STAGE_TIMEOUTS_MS["single-node"]),
        StageSpec("scaled", "scaled", (), "manual", DEFAULT_STAGE_TIMEOUTS_MS["scaled"]),
    )


# ---------------------------------------------------------------------------
# validation


def _require_ident(value: Any, where: str) -> str:
    if not isinstance(value, str) or not _IDENT_RE.match(value):
        raise SpecSchemaError(f"{where}: expected an identifier, got {value!r}", field=where)
    return value


def validate_workflow(spec: WorkflowSpec, *, require_full_pipeline: bool = True) -> WorkflowSpec:
    """Check every structural invariant; returns the spec unchanged when valid.

    ``require_full_pipeline=False`` relaxes the stage-backbone rule so reduced
    (single-node-truncated) variants validate; everything else still applies.
    """
    _require_ident(spec.name, "name")

    seen: set[str] = set()
    for app in spec.applications:
        _require_ident(app.name, "applications[].name")
        if app.name in seen:
            raise DuplicateNameError(f"duplicate application name {app.name!r}", name=app.name)
        seen.add(app.name)
        if not app.command or not app.command[0]:
            raise SpecSchemaError(f"application {app.name!r}: command must be non-empty", field="command")
        if app.nodes < 1:
            raise SpecSchemaError(f"application {app.name!r}: nodes must be >= 1", field="nodes")
        if app.heartbeat_interval_ms is not None and app.heartbeat_interval_ms < 10:
            raise SpecSchemaError(
                f"application {app.name!r}: heartbeat_interval_ms must be >= 10",
                field="heartbeat_interval_ms",
            )
        if not 0.0 <= app.failure_probability <= 1.0:
            raise DomainError(
                f"application {app.name!r}: failure_probability {app.failure_probability} outside [0, 1]",
                field="failure_probability",
            )
        if app.scale_factor <= 0:
            raise SpecSchemaError(f"application {app.name!r}: scale_factor must be > 0", field="scale_factor")
        if app.log_pattern is not None:
            try:
                re.compile(app.log_pattern)
            except re.error as exc:
                raise SpecSchemaError(
                    f"application {app.name!r}: log_pattern does not compile: {exc}",
                    field="log_pattern",
                ) from exc

    ch_seen: set[str] = set()
    for ch in spec.channels:
        _require_ident(ch.name, "channels[].name")
        if ch.name in ch_seen:
            raise DuplicateNameError(f"duplicate channel name {ch.name!r}", name=ch.name)
        ch_seen.add(ch.name)
        if ch.kind not in CHANNEL_KINDS:
            raise SpecSchemaError(f"channel {ch.name!r}: unknown kind {ch.kind!r}", field="kind")
        for endpoint in (ch.from_app, ch.to_app):
            if endpoint not in seen:
                raise DanglingEndpointError(
                    f"channel {ch.name!r} references undeclared application {endpoint!r}",
                    channel=ch.name,
                    endpoint=endpoint,
                )
        if ch.kind != "steering" and ch.from_app == ch.to_app:
            raise SpecSchemaError(
                f"channel {ch.name!r}: from_app and to_app must differ for kind {ch.kind!r}",
                field="from_app",
            )
        if ch.stall_timeout_ms <= 0:
            raise SpecSchemaError(f"channel {ch.name!r}: stall_timeout_ms must be > 0", field="stall_timeout_ms")

    st_seen: set[str] = set()
    for st in spec.stages:
        _require_ident(st.name, "stages[].name")
        if st.name in st_seen:
            raise DuplicateNameError(f"duplicate stage name {st.name!r}", name=st.name)
        st_seen.add(st.name)
        if st.kind not in STAGE_KINDS:
            raise SpecSchemaError(f"stage {st.name!r}: unknown kind {st.kind!r}", field="kind")
        if st.approval not in APPROVAL_MODES:
            raise SpecSchemaError(f"stage {st.name!r}: unknown approval mode {st.approval!r}", field="approval")
        if st.timeout_ms <= 0:
            raise SpecSchemaError(f"stage {st.name!r}: timeout_ms must be > 0", field="timeout_ms")
        for check in st.checks:
            _require_ident(check.id, "checks[].id")
            if check.kind not in CHECK_KINDS:
                raise SpecSchemaError(f"check {check.id!r}: unknown kind {check.kind!r}", field="kind")
            if not check.target:
                raise SpecSchemaError(f"check {check.id!r}: target must be non-empty", field="target")

    backbone = [st.kind for st in spec.stages if st.kind in PIPELINE_KINDS]
    # The backbone kinds must appear exactly once each, in pipeline order, and
    # lead the stage list; extra (live) stages may only follow them. Lenient
    # mode additionally admits the reduced form truncated after single-node.
    acceptable = [list(PIPELINE_KINDS)]
    if not require_full_pipeline:
        acceptable.append(list(PIPELINE_KINDS[:2]))
    leading = [st.kind for st in spec.stages[: len(backbone)]]
    if backbone not in acceptable or leading != backbone:
        raise SpecSchemaError(
            f"stages must lead with the kinds {PIPELINE_KINDS} in order"
            f"{' (or truncated after single-node)' if not require_full_pipeline else ''},"
            f" found {[st.kind for st in spec.stages]}",
            field="stages",
        )

    policy = spec.run_defaults
    if policy.grace_multiplier < 1:
        raise SpecSchemaError("run.grace_multiplier must be >= 1", field="run.grace_multiplier")
    for fname in ("tick_ms", "sample_interval_ms", "steer_timeout_ms", "throughput_window_ms",
                  "channel_startup_grace_ms"):
        if getattr(policy, fname) <= 0:
            raise SpecSchemaError(f"run.{fname} must be > 0", field=f"run.{fname}")

    return spec


# ---------------------------------------------------------------------------
# parsing

_RUN_KEYS = {
    "grace_multiplier",
    "tick_ms",
    "sample_interval_ms",
    "steer_timeout_ms",
    "throughput_window_ms",
    "channel_startup_grace_ms",
}
_APP_KEYS = {
    "name",
    "command",
    "env",
    "nodes",
    "heartbeat_interval_ms",
    "failure_probability",
    "scale_factor",
    "log_paths",
    "log_pattern",
    "critical",
}
_CHANNEL_KEYS = {"name", "from_app", "to_app", "kind", "stall_timeout_ms"}
_STAGE_KEYS = {"name", "kind", "checks", "approval", "timeout_ms", "skip"}
_CHECK_KEYS = {"id", "kind", "target"}
_TOP_KEYS = {"name", "run", "applications", "channels", "stages"}


def _expect_mapping(node: Any, where: str) -> dict:
    if not isinstance(node, dict):
        raise SpecSchemaError(f"{where}: expected a mapping, got {type(node).__name__}", field=where)
    return node


def _expect_list(node: Any, where: str) -> list:
    if not isinstance(node, list):
        raise SpecSchemaError(f"{where}: expected a list, got {type(node).__name__}", field=where)
    return node


def _reject_unknown(node: dict, allowed: set[str], where: str) -> None:
    unknown = set(node) - allowed
    if unknown:
        raise SpecSchemaError(f"{where}: unknown key(s) {sorted(unknown)}", field=where)


def _get(node: dict, key: str, typ: type | tuple, where: str, default: Any = ...) -> Any:
    if key not in node:
        if default is ...:
            raise SpecSchemaError(f"{where}: missing required key {key!r}", field=f"{where}.{key}")
        return default
    value = node[key]
    if value is None and default is not ...:
        return default  # explicit null means "use the default" for optional keys
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, typ) or isinstance(value, bool) and typ in (int, float):
        raise SpecSchemaError(
            f"{where}.{key}: expected {getattr(typ, '__name__', typ)}, got {type(value).__name__}",
            field=f"{where}.{key}",
        )
    return value


def _parse_command(node: Any, where: str) -> tuple[str, ...]:
    if isinstance(node, str):
        return tuple(shlex.split(node))
    if isinstance(node, list) and all(isinstance(x, str) for x in node):
        return tuple(node)
    raise SpecSchemaError(f"{where}: command must be a string or list of strings", field=where)


def parse_workflow(text: str, *, require_full_pipeline: bool = True) -> WorkflowSpec:
    """Parse one workflow document (YAML; JSON is accepted as a subset).

    ``require_full_pipeline=False`` admits reduced (single-node-truncated)
    variants, which the runtime writes for its own companions.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise SpecSyntaxError(
            f"workflow file is not well-formed: {exc.problem}",
            line=(mark.line + 1) if mark else None,
            column=(mark.column + 1) if mark else None,
        ) from exc
    except yaml.YAMLError as exc:
        raise SpecSyntaxError(f"workflow file is not well-formed: {exc}") from exc

    doc = _expect_mapping(doc, "document")
    _reject_unknown(doc, _TOP_KEYS, "document")

    name = _get(doc, "name", str, "document")

    run_node = _expect_mapping(doc.get("run", {}) or {}, "run")
    _reject_unknown(run_node, _RUN_KEYS, "run")
    policy = RunPolicy(
        grace_multiplier=_get(run_node, "grace_multiplier", float, "run", 2.0),
        tick_ms=_get(run_node, "tick_ms", int, "run", 100),
        sample_interval_ms=_get(run_node, "sample_interval_ms", int, "run", 250),
        steer_timeout_ms=_get(run_node, "steer_timeout_ms", int, "run", 1000),
        throughput_window_ms=_get(run_node, "throughput_window_ms", int, "run", 1000),
        channel_startup_grace_ms=_get(run_node, "channel_startup_grace_ms", int, "run", 5000),
    )

    apps = []
    for i, node in enumerate(_expect_list(doc.get("applications", []), "applications")):
        where = f"applications[{i}]"
        node = _expect_mapping(node, where)
        _reject_unknown(node, _APP_KEYS, where)
        env = _expect_mapping(node.get("env", {}) or {}, f"{where}.env")
        log_paths = _expect_list(node.get("log_paths", []) or [], f"{where}.log_paths")
        apps.append(
            ApplicationSpec(
                name=_get(node, "name", str, where),
                command=_parse_command(node.get("command"), f"{where}.command"),
                env={str(k): str(v) for k, v in env.items()},
                nodes=_get(node, "nodes", int, where, 1),
                heartbeat_interval_ms=_get(node, "heartbeat_interval_ms", int, where, None),
                failure_probability=_get(node, "failure_probability", float, where, 0.0),
                scale_factor=_get(node, "scale_factor", float, where, 1.0),
                log_paths=tuple(str(p) for p in log_paths),
                log_pattern=_get(node, "log_pattern", str, where, None),
                critical=_get(node, "critical", bool, where, True),
            )
        )

    channels = []
    for i, node in enumerate(_expect_list(doc.get("channels", []), "channels")):
        where = f"channels[{i}]"
        node = _expect_mapping(node, where)
        _reject_unknown(node, _CHANNEL_KEYS, where)
        channels.append(
            ChannelSpec(
                name=_get(node, "name", str, where),
                from_app=_get(node, "from_app", str, where),
                to_app=_get(node, "to_app", str, where),
                kind=_get(node, "kind", str, where),
                stall_timeout_ms=_get(node, "stall_timeout_ms", int, where, 2000),
            )
        )

    if "stages" in doc and doc["stages"]:
        stages = []
        for i, node in enumerate(_expect_list(doc["stages"], "stages")):
            where = f"stages[{i}]"
            node = _expect_mapping(node, where)
            _reject_unknown(node, _STAGE_KEYS, where)
            checks = []
            for j, cnode in enumerate(_expect_list(node.get("checks", []) or [], f"{where}.checks")):
                cwhere = f"{where}.checks[{j}]"
                cnode = _expect_mapping(cnode, cwhere)
                _reject_unknown(cnode, _CHECK_KEYS, cwhere)
                checks.append(
                    CheckSpec(
                        id=_get(cnode, "id", str, cwhere),
                        kind=_get(cnode, "kind", str, cwhere),
                        target=_get(cnode, "target", str, cwhere),
                    )
                )
            kind = _get(node, "kind", str, where)
            stages.append(
                StageSpec(
                    name=_get(node, "name", str, where),
                    kind=kind,
                    checks=tuple(checks),
                    approval=_get(node, "approval", str, where, "manual" if kind == "scaled" else "automatic"),
                    timeout_ms=_get(node, "timeout_ms", int, where, DEFAULT_STAGE_TIMEOUTS_MS.get(kind, 30_000)),
                    skip=_get(node, "skip", bool, where, False),
                )
            )
        stages = tuple(stages)
    else:
        stages = default_stages()

    spec = WorkflowSpec(
        name=name,
        run_defaults=policy,
        applications=tuple(apps),
        channels=tuple(channels),
        stages=stages,
    )
    return validate_workflow(spec, require_full_pipeline=require_full_pipeline)


def load_workflow(path, *, require_full_pipeline: bool = True) -> WorkflowSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_workflow(fh.read(), require_full_pipeline=require_full_pipeline)


# ---------------------------------------------------------------------------
# canonical serialization

def _spec_to_doc(spec: WorkflowSpec) -> dict:
    return {
        "name": spec.name,
        "run": {
            "grace_multiplier": spec.run_defaults.grace_multiplier,
            "tick_ms": spec.run_defaults.tick_ms,
            "sample_interval_ms": spec.run_defaults.sample_interval_ms,
            "steer_timeout_ms": spec.run_defaults.steer_timeout_ms,
            "throughput_window_ms": spec.run_defaults.throughput_window_ms,
            "channel_startup_grace_ms": spec.run_defaults.channel_startup_grace_ms,
        },
        "applications": [
            {
                "name": a.name,
                "command": list(a.command),
                "env": dict(sorted(a.env.items())),
                "nodes": a.nodes,
                "heartbeat_interval_ms": a.heartbeat_interval_ms,
                "failure_probability": a.failure_probability,
                "scale_factor": a.scale_factor,
                "log_paths": list(a.log_paths),
                "log_pattern": a.log_pattern,
                "critical": a.critical,
            }
            for a in spec.applications
        ],
        "channels": [
            {
                "name": c.name,
                "from_app": c.from_app,
                "to_app": c.to_app,
                "kind": c.kind,
                "stall_timeout_ms": c.stall_timeout_ms,
            }
            for c in spec.channels
        ],
        "stages": [
            {
                "name": s.name,
                "kind": s.kind,
                "checks": [{"id": c.id, "kind": c.kind, "target": c.target} for c in s.checks],
                "approval": s.approval,
                "timeout_ms": s.timeout_ms,
                "skip": s.skip,
            }
            for s in spec.stages
        ],
    }


def serialize_workflow(spec: WorkflowSpec) -> str:
    """Canonical text form: fixed key order, explicit defaults, deterministic output.

    ``parse_workflow(serialize_workflow(s))`` reconstructs an equal value and
    re-serializing is byte-identical.
    """
    return yaml.safe_dump(_spec_to_doc(spec), sort_keys=False, default_flow_style=False)


# ---------------------------------------------------------------------------
# failure model

def estimate_system_failure(probabilities: Iterable[float]) -> ReliabilityEstimate:
    """Aggregate failure probability of independent components: 1 - prod(1 - p_i)."""
    probs = tuple(float(p) for p in probabilities)
    for p in probs:
        if not 0.0 <= p <= 1.0 or math.isnan(p):
            raise DomainError(f"failure probability {p} outside [0, 1]", value=p)
    survival = 1.0
    for p in probs:
        survival *= 1.0 - p
    return ReliabilityEstimate(component_probabilities=probs, system_failure_probability=1.0 - survival)


# ---------------------------------------------------------------------------
# single-node reduction

def reduce_to_single_node(spec: WorkflowSpec) -> WorkflowSpec:
    """Desk/verification variant: all applications present, every one confined
    to one node, stage list cut after the single-node stage. Idempotent."""
    apps = tuple(replace(a, nodes=1) for a in spec.applications)
    cut = len(spec.stages)
    for i, st in enumerate(spec.stages):
        if st.kind == "single-node":
            cut = i + 1
            break
    return replace(spec, applications=apps, stages=spec.stages[:cut])
