"""In-application monitoring stream: wire format, emitter helper, collector.

Wire form: newline-delimited JSON records over a local TCP stream. The same
records are accepted as ``@TP ``-prefixed log lines (for applications without a
socket); both transports normalize to identical store events.

The connection is duplex: the collector pushes steering commands back down an
application's connection as ``{"steer": {...}}`` lines.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable

from .errors import DecodeError
from .store import EventStore

log = logging.getLogger(__name__)

TRACEPOINT_KINDS = ("heartbeat", "steer_ack", "io_stat", "progress")

LOG_LINE_PREFIX = "@TP "
STEER_LINE_PREFIX = "@STEER "

_REQUIRED_PAYLOAD = {
    "heartbeat": ("iteration",),
    "steer_ack": ("command_id", "status"),
    "io_stat": ("channel", "bytes"),
    "progress": ("phase",),
}


@dataclass(frozen=True)
class TracepointEvent:
    ts_wall: int
    seq: int
    run_id: str
    app_name: str
    kind: str
    payload: dict


def encode(event: TracepointEvent) -> bytes:
    """One newline-terminated record; decode(encode(e)) == e."""
    rec = {
        "ts": event.ts_wall,
        "seq": event.seq,
        "run": event.run_id,
        "app": event.app_name,
        "kind": event.kind,
        "payload": event.payload,
    }
    return (json.dumps(rec, separators=(",", ":"), sort_keys=True) + "\n").encode("utf-8")


def decode(line: bytes | str) -> TracepointEvent:
    """Parse one record; raises DecodeError with a distinct reason on rejects."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("record is not UTF-8", reason="truncated") from exc
    try:
        rec = json.loads(line)
    except ValueError as exc:
        raise DecodeError(f"record is not complete JSON: {exc}", reason="truncated") from exc
    if not isinstance(rec, dict):
        raise DecodeError("record is not an object", reason="truncated")
    for key in ("ts", "seq", "run", "app", "kind", "payload"):
        if key not in rec:
            raise DecodeError(f"record missing field {key!r}", reason=f"missing-field:{key}")
    kind = rec["kind"]
    if kind not in TRACEPOINT_KINDS:
        raise DecodeError(f"unknown tracepoint kind {kind!r}", reason="unknown-kind")
    payload = rec["payload"]
    if not isinstance(payload, dict):
        raise DecodeError("payload is not an object", reason="missing-field:payload")
    for fieldname in _REQUIRED_PAYLOAD[kind]:
        if fieldname not in payload:
            raise DecodeError(
                f"{kind} payload missing {fieldname!r}", reason=f"missing-field:{fieldname}"
            )
    if kind == "steer_ack" and payload["status"] not in ("applied", "rejected"):
        raise DecodeError(
            f"steer_ack status {payload['status']!r} not applied/rejected",
            reason="bad-value:status",
        )
    if kind == "io_stat":
        if not isinstance(payload["bytes"], int) or payload["bytes"] < 0:
            raise DecodeError("io_stat bytes must be a non-negative integer", reason="bad-value:bytes")
        lat = payload.get("latency_us")
        if lat is not None and (not isinstance(lat, (int, float)) or lat < 0):
            raise DecodeError("io_stat latency_us must be non-negative", reason="bad-value:latency_us")
    if not isinstance(rec["seq"], int) or rec["seq"] < 0:
        raise DecodeError("seq must be a non-negative integer", reason="bad-value:seq")
    return TracepointEvent(
        ts_wall=rec["ts"],
        seq=rec["seq"],
        run_id=rec["run"],
        app_name=rec["app"],
        kind=kind,
        payload=payload,
    )


class SeqTracker:
    """Per-source strictly-increasing seq enforcement shared by both transports.

    A record at or below the last accepted seq is stored flagged, never
    silently reordered; only unflagged records advance the accepted sequence.
    """

    def __init__(self):
        self._last: dict[tuple[str, str], int] = {}

    def admit(self, tp: TracepointEvent) -> bool:
        """True if the seq extends the accepted sequence; False -> flag out_of_order."""
        key = (tp.run_id, tp.app_name)
        last = self._last.get(key)
        if last is not None and tp.seq <= last:
            return False
        self._last[key] = tp.seq
        return True


def tracepoint_fields(tp: TracepointEvent, *, out_of_order: bool = False,
                      suspect: bool = False) -> dict:
    """Flat event payload a normalized tracepoint contributes to the store."""
    fields = dict(tp.payload)
    fields["tp_seq"] = tp.seq
    fields["tp_ts"] = tp.ts_wall
    if out_of_order:
        fields["out_of_order"] = True
    if suspect:
        fields["suspect"] = True
    return fields


# ---------------------------------------------------------------------------
# emitter

class Emitter:
    """Fire-and-forget tracepoint sender used by instrumented applications.

    emit() appends to a small local buffer and returns within ``budget_ms``;
    a background thread drains the buffer to the collector socket. When the
    buffer is full past the budget the event is dropped and counted; the drop
    count rides along in the next event's payload. Falls back to ``@TP `` log
    lines on ``sink`` when no socket is available.
    """

    def __init__(self, run_id: str, app_name: str, addr: tuple[str, int] | None,
                 sink: Callable[[str], None] | None = None,
                 budget_ms: float = 1.0, buffer: int = 4096,
                 reconnect_attempts: int = 20, reconnect_delay: float = 0.25):
        self.run_id = run_id
        self.app_name = app_name
        self.addr = addr
        self.sink = sink
        self.budget_s = budget_ms / 1000.0
        self.reconnect_attempts = reconnect_attempts
        self.reconnect_delay = reconnect_delay
        self.on_steer: Callable[[dict], None] | None = None
        self._seq = 0
        self._dropped = 0
        self._buffer: deque[bytes] = deque()
        self._buffer_max = buffer
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._sock: socket.socket | None = None
        self._stop = threading.Event()
        self._sender: threading.Thread | None = None
        self._reader: threading.Thread | None = None
        if addr is not None:
            self._sender = threading.Thread(target=self._send_loop, daemon=True, name="tp-emitter")
            self._sender.start()

    @property
    def socket_mode(self) -> bool:
        return self.addr is not None

    def _next(self, kind: str, payload: dict) -> TracepointEvent:
        with self._lock:
            self._seq += 1
            if self._dropped:
                payload = dict(payload, dropped=self._dropped)
                self._dropped = 0
            return TracepointEvent(
                ts_wall=int(time.time() * 1000),
                seq=self._seq,
                run_id=self.run_id,
                app_name=self.app_name,
                kind=kind,
                payload=payload,
            )

    def emit(self, kind: str, payload: dict) -> None:
        tp = self._next(kind, payload)
        line = encode(tp)
        if self.addr is None:
            if self.sink is not None:
                self.sink(LOG_LINE_PREFIX + line.decode("utf-8").rstrip("\n"))
            return
        deadline = time.monotonic() + self.budget_s
        with self._ready:
            while len(self._buffer) >= self._buffer_max:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._dropped += 1
                    return
                self._ready.wait(remaining)
            self._buffer.append(line)
            self._ready.notify_all()

    def heartbeat(self, iteration: int) -> None:
        self.emit("heartbeat", {"iteration": iteration})

    def io_stat(self, channel: str, nbytes: int, latency_us: int | None = None) -> None:
        payload = {"channel": channel, "bytes": int(nbytes)}
        if latency_us is not None:
            payload["latency_us"] = int(latency_us)
        self.emit("io_stat", payload)

    def steer_ack(self, command_id: str, status: str) -> None:
        self.emit("steer_ack", {"command_id": command_id, "status": status})

    def progress(self, phase: str) -> None:
        self.emit("progress", {"phase": phase})

    # -- socket plumbing ----------------------------------------------------

    def _connect(self) -> socket.socket | None:
        for _ in range(self.reconnect_attempts):
            if self._stop.is_set():
                return None
            try:
                sock = socket.create_connection(self.addr, timeout=2.0)
                hello = json.dumps({"hello": {"run": self.run_id, "app": self.app_name}})
                sock.sendall((hello + "\n").encode("utf-8"))
                return sock
            except OSError:
                time.sleep(self.reconnect_delay)
        return None

    def _send_loop(self) -> None:
        while not self._stop.is_set():
            sock = self._connect()
            if sock is None:
                return
            with self._lock:
                self._sock = sock
            self._start_reader(sock)
            try:
                while not self._stop.is_set():
                    with self._ready:
                        while not self._buffer and not self._stop.is_set():
                            self._ready.wait(0.1)
                        batch = bytes().join(self._buffer)
                        self._buffer.clear()
                        self._ready.notify_all()
                    if batch:
                        sock.sendall(batch)
            except OSError:
                continue  # collector went away: reconnect with fresh budget
            finally:
                try:
                    sock.close()
                except OSError:
                    pass
                with self._lock:
                    self._sock = None

    def _start_reader(self, sock: socket.socket) -> None:
        def read_loop():
            buf = b""
            try:
                while not self._stop.is_set():
                    chunk = sock.recv(4096)
                    if not chunk:
                        return
                    buf += chunk
                    while b"\n" in buf:
                        line, buf = buf.split(b"\n", 1)
                        self._dispatch_steer(line)
            except OSError:
                return

        self._reader = threading.Thread(target=read_loop, daemon=True, name="tp-steer-reader")
        self._reader.start()

    def _dispatch_steer(self, line: bytes) -> None:
        try:
            rec = json.loads(line.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            return
        cmd = rec.get("steer") if isinstance(rec, dict) else None
        if cmd and self.on_steer is not None:
            try:
                self.on_steer(cmd)
            except Exception:
                log.exception("steer handler failed")

    def close(self, drain_timeout: float = 2.0) -> None:
        deadline = time.monotonic() + drain_timeout
        with self._ready:
            while self._buffer and time.monotonic() < deadline:
                self._ready.wait(0.05)
        self._stop.set()
        with self._ready:
            self._ready.notify_all()
        if self._sender is not None:
            self._sender.join(timeout=1.0)
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                except OSError:
                    pass


# ---------------------------------------------------------------------------
# collector

class Collector:
    """Accepts tracepoint connections and appends normalized events to the store.

    Bad records are rejected and counted without disturbing the stream; seq
    regressions are flagged ``out_of_order``; records whose announced source
    disagrees with the connection handshake are flagged ``suspect``. Overload
    behaviour is back-pressure via TCP, never drop.
    """

    def __init__(self, store: EventStore, host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self.tracker = SeqTracker()
        self.rejects = 0
        self.accepted = 0
        self._reject_lock = threading.Lock()
        self._conn_lock = threading.Lock()
        self._connections: dict[tuple[str, str], socket.socket] = {}
        collector = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                collector._handle(self)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True,
                                        name="tp-collector")

    @property
    def addr(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def addr_str(self) -> str:
        host, port = self.addr
        return f"{host}:{port}"

    def start(self) -> "Collector":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        with self._conn_lock:
            for sock in self._connections.values():
                try:
                    sock.close()
                except OSError:
                    pass
            self._connections.clear()

    def _handle(self, handler: socketserver.StreamRequestHandler) -> None:
        announced: tuple[str, str] | None = None
        try:
            hello_line = handler.rfile.readline()
            if not hello_line:
                return
            try:
                hello = json.loads(hello_line.decode("utf-8")).get("hello", {})
                announced = (str(hello["run"]), str(hello["app"]))
            except (ValueError, KeyError, UnicodeDecodeError):
                self._count_reject()
                return
            with self._conn_lock:
                self._connections[announced] = handler.connection
            for line in handler.rfile:
                self.ingest_line(line, announced)
        finally:
            if announced is not None:
                with self._conn_lock:
                    if self._connections.get(announced) is handler.connection:
                        del self._connections[announced]

    def _count_reject(self) -> None:
        with self._reject_lock:
            self.rejects += 1

    def ingest_line(self, line: bytes | str, announced: tuple[str, str] | None = None) -> bool:
        """Normalize one wire record into the store; False when rejected."""
        if isinstance(line, str):
            line = line.encode("utf-8")
        if not line.strip():
            return False
        try:
            tp = decode(line)
        except DecodeError as exc:
            self._count_reject()
            log.debug("rejected tracepoint record: %s", exc)
            return False
        self.ingest(tp, announced)
        return True

    def ingest(self, tp: TracepointEvent, announced: tuple[str, str] | None = None) -> None:
        suspect = announced is not None and (tp.run_id, tp.app_name) != announced
        in_order = self.tracker.admit(tp)
        self.store.append(
            run_id=tp.run_id,
            source=tp.app_name,
            kind=tp.kind,
            fields=tracepoint_fields(tp, out_of_order=not in_order, suspect=suspect),
        )
        with self._reject_lock:
            self.accepted += 1

    # -- steering downlink ---------------------------------------------------

    def send_steer(self, run_id: str, app_name: str, command: dict) -> bool:
        """Push a steering command down the app's live connection; False if none."""
        with self._conn_lock:
            sock = self._connections.get((run_id, app_name))
        if sock is None:
            return False
        line = json.dumps({"steer": command}, separators=(",", ":")) + "\n"
        try:
            sock.sendall(line.encode("utf-8"))
            return True
        except OSError:
            return False

    def connected_apps(self, run_id: str) -> list[str]:
        with self._conn_lock:
            return [app for (run, app) in self._connections if run == run_id]
