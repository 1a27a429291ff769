"""Append-only event store: the single collection point for all run telemetry.

One newline-delimited record log per run (``runs/<run_id>/events.ndj``) plus an
in-memory index. Appends are serialized and flushed before returning; readers
and subscribers never block appenders. ``root=None`` keeps runs purely in
memory (used by time-compressed chaos trials).
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty, Full, Queue
from typing import Callable, Iterable, Iterator

from .errors import IntegrityError, StoreClosedError, UnknownRunError

EVENT_KINDS = frozenset(
    {
        "launched",
        "launch_failed",
        "exit",
        "resource",
        "log",
        "log_error",
        "heartbeat",
        "steer_issue",
        "steer_ack",
        "io_stat",
        "progress",
        "verdict",
        "stage",
        "fault_injected",
    }
)

SUBSCRIBER_BUFFER = 1024


@dataclass(frozen=True)
class Event:
    store_seq: int
    ts_wall: int  # UTC milliseconds, operator-facing axis
    ts_mono: int  # store-local monotonic ns, ordering/latency axis
    run_id: str
    source: str
    kind: str
    fields: dict

    def record(self) -> dict:
        return {
            "seq": self.store_seq,
            "ts": self.ts_wall,
            "mono": self.ts_mono,
            "run": self.run_id,
            "source": self.source,
            "kind": self.kind,
            "fields": self.fields,
        }

    def line(self) -> str:
        return json.dumps(self.record(), separators=(",", ":"), sort_keys=True)

    @staticmethod
    def from_record(rec: dict) -> "Event":
        return Event(
            store_seq=rec["seq"],
            ts_wall=rec["ts"],
            ts_mono=rec["mono"],
            run_id=rec["run"],
            source=rec["source"],
            kind=rec["kind"],
            fields=rec["fields"],
        )


@dataclass(frozen=True)
class Query:
    run_id: str
    sources: frozenset[str] | None = None
    kinds: frozenset[str] | None = None
    t0: int | None = None
    t1: int | None = None
    seq_after: int | None = None
    limit: int | None = None

    def __post_init__(self):
        if self.t0 is not None and self.t1 is not None and self.t0 > self.t1:
            raise ValueError("query bounds: t0 > t1")

    def matches(self, ev: Event) -> bool:
        if ev.run_id != self.run_id:
            return False
        if self.sources is not None and ev.source not in self.sources:
            return False
        if self.kinds is not None and ev.kind not in self.kinds:
            return False
        if self.t0 is not None and ev.ts_wall < self.t0:
            return False
        if self.t1 is not None and ev.ts_wall > self.t1:
            return False
        if self.seq_after is not None and ev.store_seq <= self.seq_after:
            return False
        return True


class Subscription:
    """Live ordered stream of matching events; closes on overflow.

    A consumer that falls more than the buffer behind receives a closed stream
    with ``overflowed`` set and must re-query from its last seen seq.
    """

    def __init__(self, query: Query, buffer: int = SUBSCRIBER_BUFFER):
        self.query = query
        self._queue: Queue = Queue(maxsize=buffer)
        self.closed = False
        self.overflowed = False

    def _offer(self, ev: Event) -> None:
        if self.closed:
            return
        try:
            self._queue.put_nowait(ev)
        except Full:
            self.overflowed = True
            self.close()

    def close(self) -> None:
        self.closed = True
        try:
            self._queue.put_nowait(None)  # wake a blocked consumer
        except Full:
            pass

    def get(self, timeout: float | None = None) -> Event | None:
        """Next event, or None when the stream is closed/overflowed or times out."""
        try:
            item = self._queue.get(timeout=timeout)
        except Empty:
            return None
        return item

    def __iter__(self) -> Iterator[Event]:
        while True:
            item = self.get()
            if item is None and self.closed and self._queue.empty():
                return
            if item is not None:
                yield item


class _Run:
    def __init__(self, run_id: str, directory: Path | None):
        self.run_id = run_id
        self.directory = directory
        self.events: list[Event] = []
        self.kind_index: dict[str, list[int]] = {}
        self.source_index: dict[str, list[int]] = {}
        self.subscribers: list[Subscription] = []
        self._fh = None
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)
            self._fh = open(directory / "events.ndj", "a", encoding="utf-8")

    def index(self, ev: Event) -> None:
        self.kind_index.setdefault(ev.kind, []).append(ev.store_seq)
        self.source_index.setdefault(ev.source, []).append(ev.store_seq)


class EventStore:
    """Many concurrent appenders, one internal serializer, many readers."""

    def __init__(self, root: Path | str | None, mono=None, wall=None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self._runs: dict[str, _Run] = {}
        self._lock = threading.Lock()
        self._closed = False
        # Single clock source so ts_mono is comparable across all sources of a
        # run; injectable for time-compressed simulation.
        self._mono = mono if mono is not None else time.monotonic_ns
        self._wall = wall if wall is not None else (lambda: int(time.time() * 1000))

    # -- run lifecycle ------------------------------------------------------

    def run_dir(self, run_id: str) -> Path | None:
        return self.root / run_id if self.root is not None else None

    def open_run(self, run_id: str, meta: dict | None = None) -> None:
        with self._lock:
            self._ensure_open()
            if run_id in self._runs:
                return
            run = _Run(run_id, self.run_dir(run_id))
            self._runs[run_id] = run
        if meta is not None and run.directory is not None:
            (run.directory / "meta").write_text(
                json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8"
            )

    def run_meta(self, run_id: str) -> dict:
        d = self.run_dir(run_id)
        if d is None or not (d / "meta").exists():
            return {}
        return json.loads((d / "meta").read_text(encoding="utf-8"))

    def load_run(self, run_id: str) -> int:
        """Recover a run from disk; returns the number of recovered events.

        A torn trailing record (crash artifact) is discarded; corruption in the
        body or a non-dense seq sequence raises IntegrityError.
        """
        d = self.run_dir(run_id)
        if d is None or not (d / "events.ndj").exists():
            raise UnknownRunError(f"no stored run {run_id!r}", run_id=run_id)
        raw = (d / "events.ndj").read_bytes()
        events = _parse_log(raw, run_id)
        with self._lock:
            self._ensure_open()
            if run_id in self._runs:
                raise IntegrityError(f"run {run_id!r} already open", run_id=run_id)
            run = _Run(run_id, d)
            for ev in events:
                run.events.append(ev)
                run.index(ev)
            self._runs[run_id] = run
        return len(events)

    def list_runs(self) -> list[str]:
        with self._lock:
            names = set(self._runs)
        if self.root is not None and self.root.exists():
            names.update(p.name for p in self.root.iterdir() if (p / "events.ndj").exists())
        return sorted(names)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            for run in self._runs.values():
                if run._fh is not None:
                    run._fh.close()
                    run._fh = None
                for sub in run.subscribers:
                    sub.close()

    def _ensure_open(self) -> None:
        if self._closed:
            raise StoreClosedError("store is closed")

    # -- append -------------------------------------------------------------

    def append(self, run_id: str, source: str, kind: str, fields: dict | None = None,
               ts_wall: int | None = None) -> Event:
        """Assign the next store_seq, persist, then fan out to subscribers."""
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        fields = fields if fields is not None else {}
        with self._lock:
            self._ensure_open()
            run = self._runs.get(run_id)
            if run is None:
                run = _Run(run_id, self.run_dir(run_id))
                self._runs[run_id] = run
            ev = Event(
                store_seq=len(run.events) + 1,
                ts_wall=ts_wall if ts_wall is not None else self._wall(),
                ts_mono=self._mono(),
                run_id=run_id,
                source=source,
                kind=kind,
                fields=fields,
            )
            run.events.append(ev)
            run.index(ev)
            if run._fh is not None:
                try:
                    run._fh.write(ev.line() + "\n")
                    run._fh.flush()
                except OSError as exc:
                    raise StoreClosedError(f"event log write failed: {exc}", run_id=run_id) from exc
            subscribers = list(run.subscribers)
        for sub in subscribers:
            if sub.query.matches(ev):
                sub._offer(ev)
        return ev

    # -- read ---------------------------------------------------------------

    def query(self, q: Query) -> list[Event]:
        with self._lock:
            run = self._runs.get(q.run_id)
            if run is None:
                return []
            events = run.events
            # seq is the list position + 1, so seq_after gives a start offset.
            start = q.seq_after if q.seq_after is not None and q.seq_after > 0 else 0
            snapshot = events[start:]
        out = []
        for ev in snapshot:
            if q.matches(ev):
                out.append(ev)
                if q.limit is not None and len(out) >= q.limit:
                    break
        return out

    def last_seq(self, run_id: str) -> int:
        with self._lock:
            run = self._runs.get(run_id)
            return len(run.events) if run else 0

    def subscribe(self, q: Query, buffer: int = SUBSCRIBER_BUFFER) -> Subscription:
        """Stream of matching events with seq > q.seq_after (backlog included),
        then everything appended later, exactly once and in order."""
        if q.t0 is not None or q.t1 is not None:
            raise ValueError("subscribe takes a bound-free query (no t0/t1)")
        sub = Subscription(q, buffer=buffer)
        with self._lock:
            self._ensure_open()
            run = self._runs.get(q.run_id)
            if run is None:
                run = _Run(q.run_id, self.run_dir(q.run_id))
                self._runs[q.run_id] = run
            # seq_after=0 means "everything from the start"; None means live only
            start = q.seq_after if q.seq_after is not None else len(run.events)
            backlog = run.events[start:]
            run.subscribers.append(sub)
        for ev in backlog:
            if q.matches(ev):
                sub._offer(ev)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            run = self._runs.get(sub.query.run_id)
            if run and sub in run.subscribers:
                run.subscribers.remove(sub)
        sub.close()

    # -- export / import ----------------------------------------------------

    def export(self, run_id: str) -> Iterator[str]:
        """All run events as newline-delimited records, identical to the on-disk log."""
        with self._lock:
            run = self._runs.get(run_id)
            if run is None:
                raise UnknownRunError(f"unknown run {run_id!r}", run_id=run_id)
            snapshot = list(run.events)
        for ev in snapshot:
            yield ev.line() + "\n"

    def import_run(self, run_id: str, lines: Iterable[str]) -> int:
        """Ingest an exported stream into this store under ``run_id``."""
        raw = "".join(line if line.endswith("\n") else line + "\n" for line in lines)
        events = _parse_log(raw.encode("utf-8"), run_id, remap_run=True)
        with self._lock:
            self._ensure_open()
            if run_id in self._runs and self._runs[run_id].events:
                raise IntegrityError(f"run {run_id!r} already has events", run_id=run_id)
            run = _Run(run_id, self.run_dir(run_id))
            for ev in events:
                run.events.append(ev)
                run.index(ev)
                if run._fh is not None:
                    run._fh.write(ev.line() + "\n")
            if run._fh is not None:
                run._fh.flush()
            self._runs[run_id] = run
        return len(events)


def _parse_log(raw: bytes, run_id: str, remap_run: bool = False) -> list[Event]:
    """Decode an event log; tolerate only a torn final record."""
    events: list[Event] = []
    lines = raw.split(b"\n")
    # A complete log ends with a newline, so the final split element is empty.
    torn_tail_ok = lines and lines[-1] != b""
    body, tail = (lines[:-1], lines[-1]) if torn_tail_ok else (lines[:-1], None)
    for i, line in enumerate(body):
        if not line.strip():
            continue
        try:
            rec = json.loads(line.decode("utf-8"))
            ev = Event.from_record(rec)
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise IntegrityError(
                f"corrupt record at line {i + 1} of run {run_id!r}: {exc}",
                run_id=run_id,
                line=i + 1,
            ) from exc
        if remap_run and ev.run_id != run_id:
            ev = Event(ev.store_seq, ev.ts_wall, ev.ts_mono, run_id, ev.source, ev.kind, ev.fields)
        events.append(ev)
    if tail is not None and tail.strip():
        try:
            rec = json.loads(tail.decode("utf-8"))
            ev = Event.from_record(rec)
            if remap_run and ev.run_id != run_id:
                ev = Event(ev.store_seq, ev.ts_wall, ev.ts_mono, run_id, ev.source, ev.kind, ev.fields)
            events.append(ev)
        except (ValueError, KeyError, UnicodeDecodeError):
            pass  # torn trailing record from a crash mid-append: discard
    for i, ev in enumerate(events):
        if ev.store_seq != i + 1:
            raise IntegrityError(
                f"seq gap in run {run_id!r}: expected {i + 1}, found {ev.store_seq}",
                run_id=run_id,
                expected=i + 1,
                found=ev.store_seq,
            )
    return events
