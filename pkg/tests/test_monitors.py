import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfcopilot import model, monitors
from wfcopilot.monitors import (
    MS,
    MonitorEvaluator,
    channel_status,
    heartbeat_status,
    replay_verdicts,
    steering_records,
    steering_roundtrip,
    stored_verdicts,
)
from wfcopilot.store import EventStore, Query

MiB = 1 << 20


def ms(x):
    return int(x * MS)


# ---------------------------------------------------------------------------
# heartbeat

def test_beat_inside_window_is_healthy():
    # interval 1000 ms, grace 2, beat 800 ms ago
    assert heartbeat_status(ms(200), ms(0), ms(1000), 1000, 2) == "healthy"


def test_beat_outside_window_is_stalled():
    # last beat 2100 ms ago > 2 * 1000 ms
    assert heartbeat_status(ms(0), ms(0), ms(2100), 1000, 2) == "stalled"


def test_no_beats_within_startup_grace_is_starting():
    assert heartbeat_status(None, ms(0), ms(500), 1000, 2) == "starting"


def test_no_beats_after_grace_is_stalled():
    assert heartbeat_status(None, ms(0), ms(2001), 1000, 2) == "stalled"


@settings(max_examples=300, deadline=None)
@given(
    last_beat=st.one_of(st.none(), st.integers(0, 10_000)),
    started=st.integers(0, 1000),
    now=st.integers(0, 40_000),
    later=st.integers(1, 20_000),
    interval=st.integers(10, 2000),
    grace=st.floats(1, 5),
)
def test_stalled_is_monotone_in_now(last_beat, started, now, later, interval, grace):
    if last_beat is not None and last_beat < started:
        last_beat = started
    now = max(now, started, last_beat or 0)
    first = heartbeat_status(ms(last_beat) if last_beat is not None else None,
                             ms(started), ms(now), interval, grace)
    second = heartbeat_status(ms(last_beat) if last_beat is not None else None,
                              ms(started), ms(now + later), interval, grace)
    if first == "stalled":
        assert second == "stalled"


# ---------------------------------------------------------------------------
# channels

def test_channel_throughput_hand_value():
    # 1 MiB every 100 ms; window 1 s -> 10 MiB/s within one event quantum
    events = [(ms(100 * i), MiB) for i in range(1, 31)]
    status, rate = channel_status(events, 500, ms(3000), ms(0), window_ms=1000)
    assert status == "healthy"
    assert abs(rate - 10 * MiB) <= MiB


def test_channel_silent_past_timeout_is_stalled():
    status, rate = channel_status([], 500, ms(501), ms(0))
    assert status == "stalled"
    assert rate == 0.0


def test_channel_single_event_defines_throughput():
    events = [(ms(100), 2048)]
    status, rate = channel_status(events, 500, ms(400), ms(0), window_ms=1000)
    assert status == "healthy"
    assert rate == pytest.approx(2048 / 1.0)


def test_channel_startup_grace_defers_stall():
    assert channel_status([], 100, ms(400), ms(0), startup_grace_ms=1000)[0] == "starting"
    assert channel_status([], 100, ms(1100), ms(0), startup_grace_ms=1000)[0] == "stalled"


# ---------------------------------------------------------------------------
# steering

def _steer_events(store, acks):
    store.append("r", "system", "steer_issue", {"command_id": "c1"})
    for offset_ms, status in acks:
        store.append("r", "a", "steer_ack",
                     {"command_id": "c1", "status": status})
    return store.query(Query(run_id="r"))


def test_steering_ack_within_timeout(mem_store):
    events = _steer_events(mem_store, [(40, "applied")])
    record = steering_roundtrip(events, "c1", 1000, events[-1].ts_mono + ms(1))
    assert record.status == "applied"
    assert record.latency_ms is not None and record.latency_ms >= 0


def test_steering_timeout(mem_store):
    events = _steer_events(mem_store, [])
    now = events[0].ts_mono + ms(1001)
    record = steering_roundtrip(events, "c1", 1000, now)
    assert record.status == "timed_out"
    assert record.acked_at is None


def test_duplicate_ack_first_wins(mem_store):
    events = _steer_events(mem_store, [(40, "applied"), (50, "rejected")])
    record = steering_roundtrip(events, "c1", 1000, events[-1].ts_mono + ms(1))
    assert record.status == "applied"
    assert record.duplicate_acks == 1


def test_steering_records_lists_all_commands(mem_store):
    mem_store.append("r", "system", "steer_issue", {"command_id": "c1"})
    mem_store.append("r", "system", "steer_issue", {"command_id": "c2"})
    mem_store.append("r", "a", "steer_ack", {"command_id": "c2", "status": "rejected"})
    events = mem_store.query(Query(run_id="r"))
    records = steering_records(events, 60_000, events[-1].ts_mono + 1)
    assert [r.command_id for r in records] == ["c1", "c2"]
    assert records[0].status == "pending"
    assert records[1].status == "rejected"


# ---------------------------------------------------------------------------
# evaluator + replay

class VirtualClock:
    def __init__(self):
        self.t_ms = 0

    def mono(self):
        return ms(self.t_ms)

    def wall(self):
        return self.t_ms


def _spec(interval=200, grace=2.0, tick=100, channels=(), steer_timeout=1000):
    apps = (model.ApplicationSpec(name="app", command=("/bin/true",),
                                  heartbeat_interval_ms=interval),)
    return model.WorkflowSpec(
        name="w",
        run_defaults=model.RunPolicy(grace_multiplier=grace, tick_ms=tick,
                                     steer_timeout_ms=steer_timeout,
                                     channel_startup_grace_ms=500),
        applications=apps,
        channels=tuple(channels),
        stages=model.default_stages(),
    )


def _virtual_run(spec, script, end_ms):
    """Drive a store with (t_ms, source, kind, fields) then evaluate every tick."""
    clock = VirtualClock()
    store = EventStore(None, mono=clock.mono, wall=clock.wall)
    evaluator = MonitorEvaluator(store, spec, "r", "stage", origin_mono=0)
    evaluator.start()
    for t, source, kind, fields in sorted(script, key=lambda x: x[0]):
        clock.t_ms = t
        store.append("r", source, kind, fields)
    clock.t_ms = end_ms
    evaluator.process_until(clock.mono())
    evaluator.finalize()
    return store


def test_evaluator_emits_stall_then_recovery():
    script = [(0, "app", "launched", {"pid": 1})]
    script += [(t, "app", "heartbeat", {"iteration": t}) for t in (150, 250, 350)]
    script += [(1200, "app", "heartbeat", {"iteration": 99})]
    store = _virtual_run(_spec(), script, end_ms=1500)
    verdicts = [(v["status"], v["since"]) for v in stored_verdicts(
        store.query(Query(run_id="r")))]
    statuses = [s for s, _ in verdicts]
    assert statuses == ["starting", "healthy", "stalled", "healthy"]
    # stall crossing moment is last beat + grace window, tick-independent
    assert verdicts[2][1] == ms(350) + ms(400)


def test_evaluator_dead_after_exit():
    script = [
        (0, "app", "launched", {"pid": 1}),
        (150, "app", "heartbeat", {"iteration": 1}),
        (400, "app", "exit", {"exit_code": 0, "classified": "success"}),
    ]
    store = _virtual_run(_spec(), script, end_ms=1500)
    statuses = [v["status"] for v in stored_verdicts(store.query(Query(run_id="r")))]
    assert statuses == ["starting", "healthy", "dead"]


def test_evaluator_channel_stall_and_steer_timeout():
    ch = model.ChannelSpec("B", "app", "app", "steering", 100)  # ignored: steering
    data = model.ChannelSpec("D", "app", "app", "steering", 100)
    spec = _spec(channels=())
    # steering timeout path
    script = [
        (0, "app", "launched", {"pid": 1}),
        (50, "system", "steer_issue", {"command_id": "c1"}),
        (100, "app", "heartbeat", {"iteration": 1}),
        (900, "app", "heartbeat", {"iteration": 2}),  # hold app healthy-ish
    ]
    store = _virtual_run(spec, script, end_ms=2500)
    steering = [v for v in stored_verdicts(store.query(Query(run_id="r")))
                if v["subject_kind"] == "steering"]
    assert [v["status"] for v in steering] == ["timed_out"]
    assert steering[0]["since"] == ms(50) + ms(1000)


def test_replay_reproduces_stored_verdicts_exactly():
    spec = _spec()
    script = [(0, "app", "launched", {"pid": 1})]
    script += [(t, "app", "heartbeat", {"iteration": t}) for t in range(150, 1151, 100)]
    script += [(2600, "app", "exit", {"exit_code": 1, "classified": "failure"})]
    store = _virtual_run(spec, script, end_ms=3000)
    events = store.query(Query(run_id="r"))
    stored = stored_verdicts(events)
    assert [v["status"] for v in stored] == ["starting", "healthy", "stalled", "dead"]
    assert replay_verdicts(events, spec) == stored


def test_replay_detects_tampered_verdicts():
    spec = _spec()
    script = [(0, "app", "launched", {"pid": 1}),
              (100, "app", "heartbeat", {"iteration": 1})]
    store = _virtual_run(spec, script, end_ms=500)
    events = store.query(Query(run_id="r"))
    stored = stored_verdicts(events)
    stored[0]["status"] = "dead"  # tamper
    assert replay_verdicts(events, spec) != stored


def test_flagged_telemetry_never_influences_health():
    spec = _spec()
    script = [(0, "app", "launched", {"pid": 1}),
              (150, "app", "heartbeat", {"iteration": 1})]
    # a stale, out-of-order beat arrives much later; it must not revive health
    script += [(1500, "app", "heartbeat", {"iteration": 0, "out_of_order": True})]
    store = _virtual_run(spec, script, end_ms=2500)
    statuses = [v["status"] for v in stored_verdicts(store.query(Query(run_id="r")))]
    assert statuses == ["starting", "healthy", "stalled"]
