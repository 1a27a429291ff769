"""Health detection over event streams: heartbeat stalls, steering round-trips,
channel stall/throughput.

The decision functions are pure in (event history, now). The evaluator runs
them on a virtual tick grid (origin + k*tick) and filters events by their
store-assigned monotonic timestamp, so re-running it over a stored log
reproduces the emitted verdict sequence exactly.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from .model import WorkflowSpec
from .store import Event, EventStore, Query

APP_STATUSES = ("starting", "healthy", "stalled", "dead", "unknown")

# Event kinds the monitors consume; verdicts/stage events are outputs, not inputs.
INPUT_KINDS = frozenset({"launched", "exit", "heartbeat", "io_stat", "steer_issue", "steer_ack"})

MS = 1_000_000  # ns per ms


@dataclass(frozen=True)
class HealthVerdict:
    subject_kind: str  # "app" | "channel" | "steering"
    subject: str
    status: str
    since: int  # monotonic ns, the analytic moment the status began
    evidence_seq: int | None = None
    extra: dict = field(default_factory=dict)

    def fields(self) -> dict:
        out = {
            "subject_kind": self.subject_kind,
            "subject": self.subject,
            "status": self.status,
            "since": self.since,
            "evidence_seq": self.evidence_seq,
        }
        out.update(self.extra)
        return out


def heartbeat_status(last_beat: int | None, started_at: int, now: int,
                     interval_ms: int, grace_multiplier: float) -> str:
    """starting | healthy | stalled purely from beat timing (exit decides dead)."""
    window = int(grace_multiplier * interval_ms * MS)
    if last_beat is None:
        return "starting" if now <= started_at + window else "stalled"
    return "healthy" if now <= last_beat + window else "stalled"


def channel_status(io_events: Iterable[tuple[int, int]], stall_timeout_ms: int,
                   now: int, started_at: int,
                   window_ms: int = 1000,
                   startup_grace_ms: int | None = None) -> tuple[str, float]:
    """(status, trailing throughput bytes/s) from (mono_ns, bytes) samples.

    Before the first sample the channel is starting, for up to
    ``startup_grace_ms`` (defaults to the stall timeout); once traffic has been
    seen, a gap longer than the stall timeout means stalled.
    """
    last = None
    window_start = now - window_ms * MS
    total = 0
    for mono, nbytes in io_events:
        if mono > now:
            break
        last = mono
        if mono > window_start:
            total += nbytes
    throughput = total / (window_ms / 1000.0)
    timeout = stall_timeout_ms * MS
    if last is None:
        grace = (startup_grace_ms if startup_grace_ms is not None else stall_timeout_ms) * MS
        status = "starting" if now <= started_at + grace else "stalled"
    else:
        status = "healthy" if now <= last + timeout else "stalled"
    return status, throughput


@dataclass
class SteeringRecord:
    command_id: str
    issued_at: int
    delivered_at: int | None = None
    acked_at: int | None = None
    status: str = "pending"  # pending | applied | rejected | timed_out
    issue_seq: int | None = None
    ack_seq: int | None = None
    duplicate_acks: int = 0

    @property
    def latency_ms(self) -> float | None:
        if self.acked_at is None:
            return None
        return (self.acked_at - self.issued_at) / MS


def steering_roundtrip(events: Iterable[Event], command_id: str,
                       timeout_ms: int, now: int) -> SteeringRecord:
    """Resolve one command's lifecycle from its steer_issue/steer_ack events.

    The first ack within the timeout wins; later acks only bump the duplicate
    counter. With no timely ack the record times out at issue + timeout.
    """
    record: SteeringRecord | None = None
    for ev in events:
        if ev.kind == "steer_issue" and ev.fields.get("command_id") == command_id:
            if record is None:
                record = SteeringRecord(command_id=command_id, issued_at=ev.ts_mono,
                                        issue_seq=ev.store_seq)
        elif ev.kind == "steer_ack" and ev.fields.get("command_id") == command_id:
            if record is None:
                continue  # ack without an issue: not this monitor's problem
            in_time = ev.ts_mono <= record.issued_at + timeout_ms * MS
            if record.status == "pending" and in_time:
                record.acked_at = ev.ts_mono
                record.ack_seq = ev.store_seq
                record.status = "applied" if ev.fields.get("status") == "applied" else "rejected"
            else:
                record.duplicate_acks += 1
    if record is None:
        raise ValueError(f"no issue event for command {command_id!r}")
    if record.status == "pending" and now > record.issued_at + timeout_ms * MS:
        record.status = "timed_out"
    return record


def steering_records(events: Iterable[Event], timeout_ms: int, now: int) -> list[SteeringRecord]:
    """All commands in issue order with resolved lifecycles (dashboard view)."""
    events = list(events)
    ids: list[str] = []
    seen = set()
    for ev in events:
        if ev.kind == "steer_issue":
            cid = ev.fields.get("command_id")
            if cid is not None and cid not in seen:
                seen.add(cid)
                ids.append(cid)
    return [steering_roundtrip(events, cid, timeout_ms, now) for cid in ids]


# ---------------------------------------------------------------------------
# evaluator

@dataclass
class _AppState:
    launched: int | None = None
    launch_seq: int | None = None
    last_beat: int | None = None
    beat_seq: int | None = None
    exited: int | None = None
    exit_seq: int | None = None
    emitted: str | None = None


@dataclass
class _ChannelState:
    samples: deque = field(default_factory=deque)  # (mono, bytes)
    last_io: int | None = None
    io_seq: int | None = None
    emitted: str | None = None


@dataclass
class _SteerState:
    issued_at: int
    issue_seq: int
    acked: bool = False
    timed_out_emitted: bool = False


class MonitorEvaluator:
    """Single per-run evaluator turning telemetry into verdict events.

    Deterministic contract: given (origin_mono, tick_ms) and the event log with
    store timestamps, the sequence of appended verdicts is a pure function --
    the live thread merely decides how often pending virtual ticks get drained.
    """

    def __init__(self, store: EventStore, spec: WorkflowSpec, run_id: str,
                 stage_name: str, origin_mono: int, tick_ms: int | None = None):
        self.store = store
        self.spec = spec
        self.run_id = run_id
        self.stage_name = stage_name
        self.origin = origin_mono
        self.tick_ms = tick_ms if tick_ms is not None else spec.run_defaults.tick_ms
        self.policy = spec.run_defaults
        self.ticks_done = 0
        self._last_seen_seq = 0
        self._pending: deque[Event] = deque()
        self._apps = {a.name: _AppState() for a in spec.applications}
        self._channels = {
            c.name: _ChannelState() for c in spec.channels if c.kind != "steering"
        }
        self._steering: dict[str, _SteerState] = {}
        self._duplicates: list[tuple[str, int]] = []
        self._finalized = False

    # -- session markers ------------------------------------------------------

    def start(self) -> None:
        marker = self.store.append(self.run_id, "system", "stage", {
            "stage": self.stage_name,
            "event": "monitor_session",
            "origin_mono": self.origin,
            "tick_ms": self.tick_ms,
        })
        if marker is not None:
            # the session consumes only events appended after its own marker,
            # so telemetry from earlier stages cannot leak into these verdicts
            self._last_seen_seq = marker.store_seq

    def finalize(self) -> int:
        """Flush every pending tick past the last stored event, then close the
        session. Sources must be quiescent before calling."""
        last_mono = self.origin
        events = self.store.query(Query(run_id=self.run_id))
        if events:
            last_mono = max(last_mono, events[-1].ts_mono)
        final_tick = max(self.ticks_done, (last_mono - self.origin) // (self.tick_ms * MS) + 1)
        self.process_ticks_until_tick(int(final_tick))
        self.store.append(self.run_id, "system", "stage", {
            "stage": self.stage_name,
            "event": "monitor_session_end",
            "ticks": self.ticks_done,
        })
        self._finalized = True
        return self.ticks_done

    # -- tick processing ------------------------------------------------------

    def tick_time(self, k: int) -> int:
        return self.origin + k * self.tick_ms * MS

    def process_until(self, now_mono: int) -> int:
        """Run every virtual tick whose time has passed; returns ticks run."""
        ran = 0
        while self.tick_time(self.ticks_done + 1) <= now_mono:
            self._run_tick(self.ticks_done + 1)
            ran += 1
        return ran

    def process_ticks_until_tick(self, k: int) -> None:
        while self.ticks_done < k:
            self._run_tick(self.ticks_done + 1)

    def _pull(self) -> None:
        for ev in self.store.query(Query(run_id=self.run_id, seq_after=self._last_seen_seq)):
            self._last_seen_seq = max(self._last_seen_seq, ev.store_seq)
            if ev.kind in INPUT_KINDS:
                self._pending.append(ev)

    def _run_tick(self, k: int) -> None:
        now = self.tick_time(k)
        self._pull()
        while self._pending and self._pending[0].ts_mono <= now:
            self._absorb(self._pending.popleft())
        verdicts = self._evaluate(now)
        self.ticks_done = k
        for v in verdicts:
            fields = v.fields()
            fields["tick"] = k
            self.store.append(self.run_id, "system", "verdict", fields)

    def _absorb(self, ev: Event) -> None:
        f = ev.fields
        if f.get("out_of_order") or f.get("suspect"):
            return  # flagged telemetry never influences health
        if ev.kind == "launched":
            st = self._apps.get(ev.source)
            if st is not None and st.launched is None:
                st.launched = ev.ts_mono
                st.launch_seq = ev.store_seq
        elif ev.kind == "exit":
            st = self._apps.get(ev.source)
            if st is not None and st.exited is None:
                st.exited = ev.ts_mono
                st.exit_seq = ev.store_seq
        elif ev.kind == "heartbeat":
            st = self._apps.get(ev.source)
            if st is not None:
                st.last_beat = ev.ts_mono
                st.beat_seq = ev.store_seq
        elif ev.kind == "io_stat":
            ch = self._channels.get(f.get("channel"))
            if ch is not None:
                ch.samples.append((ev.ts_mono, int(f.get("bytes", 0))))
                ch.last_io = ev.ts_mono
                ch.io_seq = ev.store_seq
        elif ev.kind == "steer_issue":
            cid = f.get("command_id")
            if cid is not None and cid not in self._steering:
                self._steering[cid] = _SteerState(issued_at=ev.ts_mono, issue_seq=ev.store_seq)
        elif ev.kind == "steer_ack":
            cid = f.get("command_id")
            st = self._steering.get(cid)
            if st is not None:
                if st.acked or st.timed_out_emitted:
                    self._duplicates.append((cid, ev.store_seq))
                else:
                    st.acked = True

    def _evaluate(self, now: int) -> list[HealthVerdict]:
        out: list[HealthVerdict] = []
        window = self.policy.throughput_window_ms

        for app in self.spec.applications:
            st = self._apps[app.name]
            if st.launched is None:
                continue
            status, since, evidence = self._app_status(app.name, app.heartbeat_interval_ms, st, now)
            if status != st.emitted:
                st.emitted = status
                out.append(HealthVerdict("app", app.name, status, since, evidence))

        for ch_spec in self.spec.channels:
            ch = self._channels.get(ch_spec.name)
            if ch is None:
                continue
            producer = self._apps.get(ch_spec.from_app)
            if producer is not None and producer.exited is not None:
                continue  # producer finished: the channel is done, not stalled
            # prune outside the throughput window to bound memory
            cutoff = now - window * MS
            while ch.samples and ch.samples[0][0] <= cutoff and ch.samples[0][0] != ch.last_io:
                ch.samples.popleft()
            status, throughput = channel_status(
                ch.samples, ch_spec.stall_timeout_ms, now, self.origin, window,
                startup_grace_ms=self.policy.channel_startup_grace_ms,
            )
            if status != ch.emitted:
                ch.emitted = status
                if status == "stalled":
                    if ch.last_io is not None:
                        since = ch.last_io + ch_spec.stall_timeout_ms * MS
                    else:
                        since = self.origin + self.policy.channel_startup_grace_ms * MS
                elif status == "healthy":
                    since = ch.last_io
                else:
                    since = self.origin
                out.append(HealthVerdict("channel", ch_spec.name, status, since, ch.io_seq,
                                         extra={"throughput_bps": throughput}))

        timeout_ns = self.policy.steer_timeout_ms * MS
        for cid, st in self._steering.items():
            if not st.acked and not st.timed_out_emitted and now > st.issued_at + timeout_ns:
                st.timed_out_emitted = True
                out.append(HealthVerdict("steering", cid, "timed_out",
                                         st.issued_at + timeout_ns, st.issue_seq))
        for cid, seq in self._duplicates:
            out.append(HealthVerdict("steering", cid, "duplicate_ack", now, seq))
        self._duplicates.clear()

        return out

    def _app_status(self, name: str, interval_ms: int | None, st: _AppState,
                    now: int) -> tuple[str, int, int | None]:
        if st.exited is not None:
            return "dead", st.exited, st.exit_seq
        if interval_ms is None:
            return "unknown", st.launched, st.launch_seq
        status = heartbeat_status(st.last_beat, st.launched, now, interval_ms,
                                  self.policy.grace_multiplier)
        window = int(self.policy.grace_multiplier * interval_ms * MS)
        if status == "healthy":
            return status, st.last_beat, st.beat_seq
        if status == "stalled":
            ref = st.last_beat if st.last_beat is not None else st.launched
            return status, ref + window, st.beat_seq or st.launch_seq
        return status, st.launched, st.launch_seq


# ---------------------------------------------------------------------------
# replay

def replay_verdicts(events: list[Event], spec: WorkflowSpec) -> list[dict]:
    """Re-derive the full verdict sequence of a stored run.

    Scans the stage events for monitor sessions, re-runs the evaluator over
    each session's recorded tick grid with the stored events as the only
    input, and returns the produced verdict field dicts in order.
    """
    sessions: list[tuple[int, int, int, int]] = []  # (marker_seq, origin, tick_ms, ticks)
    open_session: tuple[int, int, int] | None = None
    for ev in events:
        if ev.kind != "stage":
            continue
        if ev.fields.get("event") == "monitor_session":
            open_session = (ev.store_seq, ev.fields["origin_mono"], ev.fields["tick_ms"])
        elif ev.fields.get("event") == "monitor_session_end" and open_session is not None:
            marker_seq, origin, tick_ms = open_session
            sessions.append((marker_seq, origin, tick_ms, ev.fields["ticks"]))
            open_session = None

    out: list[dict] = []
    for marker_seq, origin, tick_ms, ticks in sessions:
        feed = _ReplayFeed(events)
        ev_out = _ReplayOut()
        evaluator = MonitorEvaluator(_ReplayStore(feed, ev_out), spec,
                                     events[0].run_id if events else "", "replay",
                                     origin, tick_ms)
        evaluator._last_seen_seq = marker_seq  # same session boundary as live
        evaluator.process_ticks_until_tick(ticks)
        out.extend(ev_out.verdicts)
    return out


def stored_verdicts(events: list[Event]) -> list[dict]:
    """The comparable projection of stored verdict events."""
    out = []
    for ev in events:
        if ev.kind == "verdict":
            out.append(dict(ev.fields))
    return out


class _ReplayFeed:
    def __init__(self, events: list[Event]):
        self.events = events


class _ReplayOut:
    def __init__(self):
        self.verdicts: list[dict] = []


class _ReplayStore:
    """Store facade for replay: reads the frozen log, captures verdict appends."""

    def __init__(self, feed: _ReplayFeed, out: _ReplayOut):
        self._feed = feed
        self._out = out

    def query(self, q: Query) -> list[Event]:
        start = q.seq_after or 0
        return [ev for ev in self._feed.events if ev.store_seq > start and q.matches(ev)]

    def append(self, run_id, source, kind, fields, ts_wall=None):
        if kind == "verdict":
            self._out.verdicts.append(dict(fields))
        return None
