"""Deterministic fault injection and the empirical check of the failure model.

A fault plan is a pure function of (seed, spec, probabilities): the same seed
always produces the identical plan, and trial batches spin per-trial sub-seeds
off the master seed, making every chaos experiment reproducible bit for bit.

``measure_failure_rate`` runs time-compressed in-process trials against the
real store and monitor code paths using a simulated clock, so a thousand
ungated trials finish in seconds while the manifestation logic stays the one
the production runtime uses.
"""

from __future__ import annotations

import logging
import random
import threading
from dataclasses import dataclass
from pathlib import Path

from .model import StageSpec, WorkflowSpec, estimate_system_failure
from .monitors import MonitorEvaluator
from .store import EventStore, Query

log = logging.getLogger(__name__)

APP_FAULT_KINDS = ("kill", "nonzero_exit", "heartbeat_silence")
CHECK_FAULT_KINDS = ("missing_dependency", "corrupt_config")
FAULT_KINDS = APP_FAULT_KINDS + ("channel_silence",) + CHECK_FAULT_KINDS

# checks whose target is a file a missing_dependency fault can remove
_PATH_CHECK_KINDS = ("path-readable", "library-resolvable", "config-parses")

NONZERO_EXIT_CODE = 7


@dataclass(frozen=True)
class FaultInstance:
    target: str
    target_kind: str  # app | channel | check
    kind: str
    at_ms: int  # offset from the armed stage's entry
    stage: str | None = None  # static stage name for check faults, else None (final stage)
    path: str | None = None


@dataclass(frozen=True)
class FaultPlan:
    seed: int
    window_ms: int
    faults: tuple[FaultInstance, ...]

    def for_target_kind(self, target_kind: str) -> list[FaultInstance]:
        return [f for f in self.faults if f.target_kind == target_kind]


def _fault_kinds_for_app(app) -> tuple[str, ...]:
    if app.heartbeat_interval_ms is None:
        return ("kill", "nonzero_exit")
    return APP_FAULT_KINDS


def plan_faults(spec: WorkflowSpec, probabilities, seed: int,
                window_ms: int = 2000,
                include_channels: bool = False,
                include_checks: bool = False) -> FaultPlan:
    """Seeded fault schedule: each component independently included with its
    probability, fault kind and time drawn from the same generator.

    ``probabilities`` is a single rate applied to every eligible component or a
    mapping keyed by application/channel name or check id.
    """
    rng = random.Random(seed)

    def prob_for(name: str) -> float:
        if isinstance(probabilities, dict):
            return float(probabilities.get(name, 0.0))
        return float(probabilities)

    faults: list[FaultInstance] = []
    for app in spec.applications:
        p = prob_for(app.name)
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability for {app.name!r} outside [0,1]: {p}")
        if rng.random() < p:
            kind = rng.choice(_fault_kinds_for_app(app))
            at = rng.randrange(window_ms)
            faults.append(FaultInstance(app.name, "app", kind, at))
    if include_channels or isinstance(probabilities, dict):
        for ch in spec.channels:
            if ch.kind == "steering":
                continue
            p = prob_for(ch.name) if isinstance(probabilities, dict) else (
                float(probabilities) if include_channels else 0.0)
            if rng.random() < p:
                faults.append(FaultInstance(ch.name, "channel", "channel_silence",
                                            rng.randrange(window_ms)))
    if include_checks or isinstance(probabilities, dict):
        static = spec.stages[0]
        for check in static.checks:
            if check.kind not in _PATH_CHECK_KINDS:
                continue
            p = prob_for(check.id) if isinstance(probabilities, dict) else (
                float(probabilities) if include_checks else 0.0)
            if rng.random() < p:
                kind = "corrupt_config" if check.kind == "config-parses" else "missing_dependency"
                faults.append(FaultInstance(check.id, "check", kind, 0,
                                            stage=static.name, path=check.target))
    return FaultPlan(seed=seed, window_ms=window_ms, faults=tuple(faults))


def sub_seeds(seed: int, n: int) -> list[int]:
    master = random.Random(seed)
    return [master.getrandbits(64) for _ in range(n)]


# ---------------------------------------------------------------------------
# runtime injection

class FaultInjector:
    """Applies a plan to a live supervised run; every applied fault leaves a
    fault_injected event joining the fault to its observable outcome."""

    def __init__(self, plan: FaultPlan, supervisor):
        self.plan = plan
        self.supervisor = supervisor
        self._timers: list[threading.Timer] = []

    def _record(self, fault: FaultInstance, noop: bool = False) -> None:
        fields = {
            "target": fault.target,
            "target_kind": fault.target_kind,
            "kind": fault.kind,
            "at_ms": fault.at_ms,
            "stage": fault.stage,
        }
        if noop:
            fields["noop"] = True
        self.supervisor.store.append(self.supervisor.run_id, "chaos", "fault_injected", fields)

    def apply_static(self, stage: StageSpec) -> None:
        """File-level sabotage applied before the checklist runs."""
        workdir = Path(self.supervisor.workdir)
        for fault in self.plan.for_target_kind("check"):
            path = workdir / fault.path if fault.path else None
            if path is None or not path.exists():
                self._record(fault, noop=True)
                continue
            if fault.kind == "missing_dependency":
                path.rename(path.with_name(path.name + ".missing"))
            elif fault.kind == "corrupt_config":
                path.write_bytes(b"\x00{{ corrupted: [unterminated\n")
            self._record(fault)

    def arm_stage(self, stage: StageSpec) -> None:
        """Schedule app/channel faults relative to a scaled/live stage entry."""
        if stage.kind not in ("scaled", "live"):
            return
        for fault in self.plan.faults:
            if fault.target_kind == "app":
                timer = threading.Timer(fault.at_ms / 1000.0, self._apply_app, args=(fault,))
            elif fault.target_kind == "channel":
                timer = threading.Timer(fault.at_ms / 1000.0, self._apply_channel, args=(fault,))
            else:
                continue
            timer.daemon = True
            timer.start()
            self._timers.append(timer)

    def disarm(self) -> None:
        for t in self._timers:
            t.cancel()
        self._timers.clear()

    def _apply_app(self, fault: FaultInstance) -> None:
        sup = self.supervisor
        if fault.kind == "kill":
            ok = sup.kill_app(fault.target)
            self._record(fault, noop=not ok)
        elif fault.kind == "nonzero_exit":
            cid = sup.control_steer(fault.target, "_exit", {"code": NONZERO_EXIT_CODE})
            self._record(fault, noop=cid is None)
        elif fault.kind == "heartbeat_silence":
            cid = sup.control_steer(fault.target, "_silence_heartbeats")
            self._record(fault, noop=cid is None)

    def _apply_channel(self, fault: FaultInstance) -> None:
        sup = self.supervisor
        try:
            ch = sup.spec.channel(fault.target)
        except KeyError:
            self._record(fault, noop=True)
            return
        cid = sup.control_steer(ch.from_app, "_mute_channel", {"channel": fault.target})
        self._record(fault, noop=cid is None)


# ---------------------------------------------------------------------------
# ungated failure-rate measurement (time-compressed)

@dataclass
class TrialResult:
    failed: bool
    manifested: int


@dataclass
class MeasureResult:
    trials: int
    failures: int
    empirical_rate: float
    predicted_rate: float
    abs_difference: float
    seed: int
    probability: float

    def record(self) -> dict:
        return {
            "trials": self.trials,
            "failures": self.failures,
            "empirical_rate": self.empirical_rate,
            "predicted_rate": self.predicted_rate,
            "abs_difference": self.abs_difference,
            "seed": self.seed,
            "probability": self.probability,
        }


class _SimClock:
    """Virtual monotonic/wall clock driven by the trial scheduler."""

    def __init__(self):
        self.now_ms = 0

    def set_ms(self, ms: int) -> None:
        self.now_ms = ms

    def mono_ns(self) -> int:
        return self.now_ms * 1_000_000

    def wall_ms(self) -> int:
        return self.now_ms


_SIM_INTERVAL_MS = 100  # virtual heartbeat interval inside trials


def simulate_trial(spec: WorkflowSpec, plan: FaultPlan, run_ms: int = 3000,
                   tick_ms: int = 100, grace_multiplier: float = 2.0) -> TrialResult:
    """One ungated, time-compressed trial over the real store and monitors.

    Every application runs a virtual loop emitting heartbeats until its planned
    fault (if any) takes effect, then the monitor evaluator judges the log on
    the same virtual axis. A trial fails when at least one injected fault
    manifests as a failure exit or stalled verdict before the run ends.
    """
    clock = _SimClock()
    store = EventStore(None, mono=clock.mono_ns, wall=clock.wall_ms)
    run_id = f"trial-{plan.seed}"
    app_faults = {f.target: f for f in plan.for_target_kind("app")}

    timeline: list[tuple[int, int, str, str, dict]] = []  # (t, order, source, kind, fields)
    for order, app in enumerate(spec.applications):
        fault = app_faults.get(app.name)
        timeline.append((0, order, app.name, "launched", {"pid": 1000 + order}))
        beat_until = run_ms
        exit_at = run_ms
        exit_fields = {"exit_code": 0, "signal": None, "classified": "success"}
        if fault is not None:
            timeline.append((fault.at_ms, order, "chaos", "fault_injected", {
                "target": app.name, "target_kind": "app", "kind": fault.kind,
                "at_ms": fault.at_ms, "stage": None,
            }))
            if fault.kind == "kill":
                beat_until = fault.at_ms
                exit_at = fault.at_ms
                exit_fields = {"exit_code": None, "signal": 9, "classified": "killed"}
            elif fault.kind == "nonzero_exit":
                beat_until = fault.at_ms
                exit_at = fault.at_ms
                exit_fields = {"exit_code": NONZERO_EXIT_CODE, "signal": None,
                               "classified": "failure"}
            elif fault.kind == "heartbeat_silence":
                beat_until = fault.at_ms  # alive but silent until natural end
        t = _SIM_INTERVAL_MS
        while t <= beat_until:
            timeline.append((t, order, app.name, "heartbeat", {"iteration": t // _SIM_INTERVAL_MS}))
            t += _SIM_INTERVAL_MS
        wall = dict(exit_fields)
        wall["wall_duration_ms"] = exit_at
        wall["peak_rss_bytes"] = 1 << 20
        timeline.append((exit_at, order, app.name, "exit", wall))

    timeline.sort(key=lambda item: (item[0], item[1]))
    for t, _, source, kind, fields in timeline:
        clock.set_ms(t)
        store.append(run_id, source, kind, fields)

    sim_spec = _with_sim_heartbeats(spec, grace_multiplier, tick_ms)
    evaluator = MonitorEvaluator(store, sim_spec, run_id, "sim", origin_mono=0, tick_ms=tick_ms)
    end_ms = run_ms + int(grace_multiplier * _SIM_INTERVAL_MS) + 2 * tick_ms
    clock.set_ms(end_ms)
    evaluator.process_ticks_until_tick(end_ms // tick_ms)

    failed_exits = [
        ev for ev in store.query(Query(run_id=run_id, kinds=frozenset({"exit"})))
        if ev.fields.get("classified") != "success"
    ]
    stalls = [
        ev for ev in store.query(Query(run_id=run_id, kinds=frozenset({"verdict"})))
        if ev.fields.get("status") == "stalled"
    ]
    manifested = len(store.query(Query(run_id=run_id, kinds=frozenset({"fault_injected"}))))
    return TrialResult(failed=bool(failed_exits or stalls), manifested=manifested)


def _with_sim_heartbeats(spec: WorkflowSpec, grace: float, tick_ms: int) -> WorkflowSpec:
    from dataclasses import replace

    apps = tuple(replace(a, heartbeat_interval_ms=_SIM_INTERVAL_MS) for a in spec.applications)
    policy = replace(spec.run_defaults, grace_multiplier=grace, tick_ms=tick_ms)
    return replace(spec, applications=apps, run_defaults=policy, channels=())


def gated_trials(spec: WorkflowSpec, workspace: Path, p: float, trials: int, seed: int,
                 home: Path | None = None) -> dict:
    """Full staged pipelines against per-trial workspace copies with seeded
    checklist-level faults; counts how many the gates catch before scale-out.

    A trial is "caught" when the run terminates before any scaled-stage launch;
    it "leaked" when a fault was injected yet a scaled launch happened anyway.
    """
    import shutil
    import tempfile

    from .runner import RunSupervisor

    caught = leaked = clean = 0
    with tempfile.TemporaryDirectory(prefix="copilot-gated-") as tmp:
        store = EventStore(home or Path(tmp) / "runs")
        for i, trial_seed in enumerate(sub_seeds(seed, trials)):
            workdir = Path(tmp) / f"trial-{i}"
            shutil.copytree(workspace, workdir)
            plan = plan_faults(spec, {c.id: p for c in spec.stages[0].checks},
                               trial_seed, include_checks=True)
            sup = RunSupervisor(spec, store, workdir=workdir, auto_approve=True,
                                fault_plan=plan, run_id=f"gated-{seed}-{i}")
            terminal = sup.execute()
            injected = store.query(Query(run_id=sup.run_id,
                                         kinds=frozenset({"fault_injected"})))
            injected = [ev for ev in injected if not ev.fields.get("noop")]
            scaled_launch = _scaled_launches(store, sup.run_id, spec)
            if not injected:
                clean += 1
            elif terminal != "passed" and not scaled_launch:
                caught += 1
            else:
                leaked += 1
            shutil.rmtree(workdir, ignore_errors=True)
    return {
        "trials": trials,
        "faulted": caught + leaked,
        "caught": caught,
        "leaked": leaked,
        "clean": clean,
        "probability": p,
        "seed": seed,
    }


def _scaled_launches(store: EventStore, run_id: str, spec: WorkflowSpec) -> int:
    """Launched events appended after the run entered a scaled/live stage."""
    scaled_names = {s.name for s in spec.stages if s.kind in ("scaled", "live")}
    entered_at: int | None = None
    count = 0
    for ev in store.query(Query(run_id=run_id)):
        f = ev.fields
        if (ev.kind == "stage" and f.get("to_status") == "running"
                and f.get("stage") in scaled_names):
            entered_at = ev.store_seq
        elif ev.kind == "launched" and entered_at is not None and ev.store_seq > entered_at:
            count += 1
    return count


def measure_failure_rate(spec: WorkflowSpec, p: float, trials: int, seed: int,
                         run_ms: int = 3000, window_ms: int = 2000) -> MeasureResult:
    """Empirical ungated system failure rate vs the independent-component model."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability outside [0,1]: {p}")
    failures = 0
    for trial_seed in sub_seeds(seed, trials):
        plan = plan_faults(spec, p, trial_seed, window_ms=window_ms)
        if simulate_trial(spec, plan, run_ms=run_ms).failed:
            failures += 1
    predicted = estimate_system_failure([p] * len(spec.applications)).system_failure_probability
    empirical = failures / trials if trials else 0.0
    return MeasureResult(
        trials=trials,
        failures=failures,
        empirical_rate=empirical,
        predicted_rate=predicted,
        abs_difference=abs(empirical - predicted),
        seed=seed,
        probability=p,
    )
