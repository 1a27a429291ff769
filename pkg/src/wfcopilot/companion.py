"""The application companion: launches one application as a child process and
captures its context, resource usage, log output, relayed tracepoints and exit
state without touching the application itself.

Runs either in-process (library use, tests) or as the ``copilot-companion``
executable, one per application, streaming events to the run's store address.
All emissions funnel through a single ordered sender so per-companion event
order is total.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import signal
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from queue import Empty, Queue

import psutil

from . import tracepoints
from .errors import (
    ExecutableNotFoundError,
    LaunchError,
    PermissionDeniedError,
    SpawnFailureError,
)
from .model import ApplicationSpec, load_workflow
from .store import EventStore

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_INTERVAL_MS = 250
TAIL_POLL_S = 0.05

# Only a vetted subset of the parent environment is persisted with the launch
# record; the full environment may hold secrets.
ENV_ALLOWLIST = ("PATH", "HOME", "USER", "LANG", "SHELL", "HOSTNAME", "PWD")


@dataclass(frozen=True)
class LaunchContext:
    app_name: str
    run_id: str
    command: tuple[str, ...]
    env: dict[str, str]
    pid: int
    start_wall: int  # UTC ms
    start_mono: int  # ns


@dataclass(frozen=True)
class ResourceSample:
    t_mono: int
    rss_bytes: int
    cpu_time_ms: int
    open_fds: int | None


@dataclass(frozen=True)
class ExitReport:
    app_name: str
    run_id: str
    exit_code: int | None
    signal: int | None
    wall_duration_ms: int
    peak_rss_bytes: int
    classified: str  # success | failure | killed

    def fields(self) -> dict:
        return {
            "exit_code": self.exit_code,
            "signal": self.signal,
            "wall_duration_ms": self.wall_duration_ms,
            "peak_rss_bytes": self.peak_rss_bytes,
            "classified": self.classified,
        }

    @staticmethod
    def from_fields(app_name: str, run_id: str, fields: dict) -> "ExitReport":
        return ExitReport(
            app_name=app_name,
            run_id=run_id,
            exit_code=fields.get("exit_code"),
            signal=fields.get("signal"),
            wall_duration_ms=fields.get("wall_duration_ms", 0),
            peak_rss_bytes=fields.get("peak_rss_bytes", 0),
            classified=fields.get("classified", "failure"),
        )


def classify_exit(returncode: int) -> tuple[int | None, int | None, str]:
    """(exit_code, signal, classification) from a Popen returncode."""
    if returncode < 0:
        return None, -returncode, "killed"
    return returncode, None, "success" if returncode == 0 else "failure"


# ---------------------------------------------------------------------------
# event senders

class DirectSender:
    """Appends straight into a local EventStore (in-process companions)."""

    def __init__(self, store: EventStore, run_id: str):
        self.store = store
        self.run_id = run_id

    def send(self, source: str, kind: str, fields: dict) -> None:
        self.store.append(self.run_id, source, kind, fields)

    def close(self) -> None:
        pass


class SocketSender:
    """Ships events as newline-delimited records to the run's ingest address.

    A queue plus one sender thread keeps emission ordered and non-blocking for
    the sampling/tailing threads.
    """

    def __init__(self, addr: tuple[str, int], run_id: str, connect_timeout: float = 5.0):
        self.run_id = run_id
        self._queue: Queue = Queue()
        self._sock = socket.create_connection(addr, timeout=connect_timeout)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True, name="event-sender")
        self._thread.start()

    def send(self, source: str, kind: str, fields: dict) -> None:
        record = {
            "event": {
                "ts": int(time.time() * 1000),
                "run": self.run_id,
                "source": source,
                "kind": kind,
                "fields": fields,
            }
        }
        self._queue.put(json.dumps(record, separators=(",", ":")) + "\n")

    def _loop(self) -> None:
        while True:
            try:
                line = self._queue.get(timeout=0.1)
            except Empty:
                if self._stop.is_set():
                    return
                continue
            try:
                self._sock.sendall(line.encode("utf-8"))
            except OSError:
                log.warning("event sink connection lost; dropping remaining events")
                return

    def close(self, drain_timeout: float = 5.0) -> None:
        deadline = time.monotonic() + drain_timeout
        while not self._queue.empty() and time.monotonic() < deadline:
            time.sleep(0.02)
        self._stop.set()
        self._thread.join(timeout=2.0)
        try:
            self._sock.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# log tailing

class LogTailer:
    """Polls a set of files (which may appear later) and emits one event per
    appended line, in file order; ``@TP `` lines are relayed as tracepoints."""

    def __init__(self, companion: "Companion", paths: list[Path], pattern: str | None):
        self.companion = companion
        self.paths = paths
        self.regex = re.compile(pattern) if pattern else None
        self._positions: dict[Path, int] = {}
        self._buffers: dict[Path, bytes] = {}
        self._errored: set[Path] = set()

    def poll(self) -> None:
        for path in self.paths:
            if path in self._errored:
                continue
            try:
                if not path.exists():
                    continue
                with open(path, "rb") as fh:
                    fh.seek(self._positions.get(path, 0))
                    chunk = fh.read()
                    self._positions[path] = fh.tell()
            except OSError as exc:
                self._errored.add(path)
                self.companion.emit("log_error", {"path": str(path), "detail": str(exc)})
                continue
            if not chunk:
                continue
            buf = self._buffers.get(path, b"") + chunk
            while b"\n" in buf:
                raw, buf = buf.split(b"\n", 1)
                self._emit_line(path, raw)
            self._buffers[path] = buf

    def flush(self) -> None:
        """Emit any unterminated trailing line once the app has exited."""
        self.poll()
        for path, buf in self._buffers.items():
            if buf:
                self._emit_line(path, buf)
        self._buffers = {p: b"" for p in self._buffers}

    def _emit_line(self, path: Path, raw: bytes) -> None:
        text = raw.decode("utf-8", errors="replace")
        if text.startswith(tracepoints.LOG_LINE_PREFIX):
            self.companion.relay_tracepoint(text[len(tracepoints.LOG_LINE_PREFIX):])
            return
        fields: dict = {"path": str(path)}
        match = self.regex.match(text) if self.regex else None
        if match:
            fields.update(match.groupdict())
            fields["parsed"] = True
        else:
            fields["parsed"] = False
        fields["raw"] = text
        self.companion.emit("log", fields)


# ---------------------------------------------------------------------------
# companion

class Companion:
    """Supervises exactly one application process for one run."""

    def __init__(self, app: ApplicationSpec, run_id: str, sender,
                 trace_addr: str | None = None,
                 sample_interval_ms: int | None = None,
                 workdir: Path | None = None,
                 capture_dir: Path | None = None):
        self.app = app
        self.run_id = run_id
        self.sender = sender
        self.trace_addr = trace_addr
        self.sample_interval_s = (sample_interval_ms or DEFAULT_SAMPLE_INTERVAL_MS) / 1000.0
        self.workdir = Path(workdir) if workdir else Path.cwd()
        self.capture_dir = Path(capture_dir) if capture_dir else self.workdir
        self.ctx: LaunchContext | None = None
        self.report: ExitReport | None = None
        self.proc: subprocess.Popen | None = None
        self.peak_rss = 0
        self._tracker = tracepoints.SeqTracker()
        self._threads: list[threading.Thread] = []
        self._exited = threading.Event()
        self._report_lock = threading.Lock()

    # -- emission -------------------------------------------------------------

    def emit(self, kind: str, fields: dict) -> None:
        self.sender.send(self.app.name, kind, fields)

    def relay_tracepoint(self, record_text: str) -> None:
        """Normalize an ``@TP`` log line into the same event a socket record yields."""
        try:
            tp = tracepoints.decode(record_text)
        except Exception as exc:
            self.emit("log_error", {"detail": f"bad tracepoint log line: {exc}"})
            return
        suspect = (tp.run_id, tp.app_name) != (self.run_id, self.app.name)
        in_order = self._tracker.admit(tp)
        self.sender.send(
            tp.app_name, tp.kind,
            tracepoints.tracepoint_fields(tp, out_of_order=not in_order, suspect=suspect),
        )

    # -- lifecycle ------------------------------------------------------------

    def launch(self) -> LaunchContext:
        env = dict(os.environ)
        env.update(self.app.env)
        env["COPILOT_RUN_ID"] = self.run_id
        env["COPILOT_APP"] = self.app.name
        env["COPILOT_TRACE_ADDR"] = self.trace_addr or ""

        exe = self.app.command[0]
        resolved = self._resolve_executable(exe, env.get("PATH", ""))

        self.capture_dir.mkdir(parents=True, exist_ok=True)
        stdout_path = self.capture_dir / f"{self.app.name}.stdout"
        stderr_path = self.capture_dir / f"{self.app.name}.stderr"

        start_wall = int(time.time() * 1000)
        start_mono = time.monotonic_ns()
        try:
            with open(stdout_path, "ab") as out, open(stderr_path, "ab") as err:
                self.proc = subprocess.Popen(
                    [resolved, *self.app.command[1:]],
                    env=env,
                    cwd=str(self.workdir),
                    stdout=out,
                    stderr=err,
                    start_new_session=True,
                )
        except PermissionError as exc:
            self._launch_failed("permission-denied", str(exc))
            raise PermissionDeniedError(str(exc), app=self.app.name) from exc
        except FileNotFoundError as exc:
            self._launch_failed("executable-not-found", str(exc))
            raise ExecutableNotFoundError(str(exc), app=self.app.name) from exc
        except OSError as exc:
            self._launch_failed("spawn-failure", str(exc))
            raise SpawnFailureError(str(exc), app=self.app.name) from exc

        self.ctx = LaunchContext(
            app_name=self.app.name,
            run_id=self.run_id,
            command=self.app.command,
            env={k: env[k] for k in ENV_ALLOWLIST if k in env},
            pid=self.proc.pid,
            start_wall=start_wall,
            start_mono=start_mono,
        )
        self.emit("launched", {
            "pid": self.proc.pid,
            "command": list(self.app.command),
            "env_subset": self.ctx.env,
            "copilot_env": {
                "COPILOT_RUN_ID": self.run_id,
                "COPILOT_APP": self.app.name,
                "COPILOT_TRACE_ADDR": env["COPILOT_TRACE_ADDR"],
            },
        })

        log_paths = [self.workdir / p for p in self.app.log_paths]
        log_paths += [stdout_path, stderr_path]
        tailer = LogTailer(self, log_paths, self.app.log_pattern)
        self._threads = [
            threading.Thread(target=self._sample_loop, daemon=True, name=f"sampler-{self.app.name}"),
            threading.Thread(target=self._tail_loop, args=(tailer,), daemon=True,
                             name=f"tailer-{self.app.name}"),
        ]
        for t in self._threads:
            t.start()
        return self.ctx

    def _resolve_executable(self, exe: str, path_env: str) -> str:
        candidate = Path(exe)
        if not candidate.is_absolute():
            local = self.workdir / exe
            if local.exists():
                candidate = local
            else:
                import shutil
                found = shutil.which(exe, path=path_env or None)
                if found is None:
                    self._launch_failed("executable-not-found", f"{exe!r} not on PATH")
                    raise ExecutableNotFoundError(f"{exe!r} not found on PATH", app=self.app.name)
                candidate = Path(found)
        if not candidate.exists():
            self._launch_failed("executable-not-found", f"{candidate} does not exist")
            raise ExecutableNotFoundError(f"{candidate} does not exist", app=self.app.name)
        if not os.access(candidate, os.X_OK):
            self._launch_failed("permission-denied", f"{candidate} is not executable")
            raise PermissionDeniedError(f"{candidate} is not executable", app=self.app.name)
        return str(candidate)

    def _launch_failed(self, error_kind: str, detail: str) -> None:
        self.emit("launch_failed", {"error": error_kind, "detail": detail})

    # -- stream A: resource usage ----------------------------------------------

    def sample_resources(self) -> ResourceSample | None:
        """Current readings for a live process; None once it has exited."""
        if self.proc is None or self.proc.poll() is not None:
            return None
        try:
            p = psutil.Process(self.proc.pid)
            with p.oneshot():
                mem = p.memory_info().rss
                cpu = p.cpu_times()
                try:
                    fds = p.num_fds()
                except (psutil.Error, AttributeError):
                    fds = None
        except psutil.Error:
            return None
        sample = ResourceSample(
            t_mono=time.monotonic_ns(),
            rss_bytes=mem,
            cpu_time_ms=int((cpu.user + cpu.system) * 1000),
            open_fds=fds,
        )
        self.peak_rss = max(self.peak_rss, sample.rss_bytes)
        self.emit("resource", {
            "rss_bytes": sample.rss_bytes,
            "cpu_time_ms": sample.cpu_time_ms,
            "open_fds": sample.open_fds,
        })
        return sample

    def _sample_loop(self) -> None:
        while not self._exited.is_set():
            if self.sample_resources() is None:
                return
            self._exited.wait(self.sample_interval_s)

    def _tail_loop(self, tailer: LogTailer) -> None:
        while not self._exited.is_set():
            tailer.poll()
            self._exited.wait(TAIL_POLL_S)
        tailer.flush()

    # -- exit capture -----------------------------------------------------------

    def await_exit(self, timeout: float | None = None) -> ExitReport:
        """Blocks until the child exits; exactly one report per launch."""
        assert self.proc is not None and self.ctx is not None, "launch first"
        returncode = self.proc.wait(timeout=timeout)
        with self._report_lock:
            if self.report is not None:
                return self.report
            self.sample_resources()  # final reading, best effort
            self._exited.set()
            for t in self._threads:
                t.join(timeout=2.0)
            exit_code, sig, classified = classify_exit(returncode)
            self.report = ExitReport(
                app_name=self.app.name,
                run_id=self.run_id,
                exit_code=exit_code,
                signal=sig,
                wall_duration_ms=int(time.time() * 1000) - self.ctx.start_wall,
                peak_rss_bytes=self.peak_rss,
                classified=classified,
            )
            self.emit("exit", self.report.fields())
        return self.report

    def terminate(self, grace_s: float = 3.0) -> None:
        """Stop the application: TERM to its process group, then KILL."""
        if self.proc is None or self.proc.poll() is not None:
            return
        try:
            os.killpg(os.getpgid(self.proc.pid), signal.SIGTERM)
        except (ProcessLookupError, PermissionError):
            return
        deadline = time.monotonic() + grace_s
        while time.monotonic() < deadline:
            if self.proc.poll() is not None:
                return
            time.sleep(0.05)
        try:
            os.killpg(os.getpgid(self.proc.pid), signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass


# ---------------------------------------------------------------------------
# executable entry point

def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="copilot-companion",
                                     description="supervise one workflow application")
    parser.add_argument("--app", required=True)
    parser.add_argument("--run", required=True)
    parser.add_argument("--spec", required=True)
    parser.add_argument("--store", required=True, help="host:port event ingest address")
    parser.add_argument("--workdir", default=".")
    parser.add_argument("--capture-dir", default=None,
                        help="directory for stdout/stderr capture files")
    args = parser.parse_args(argv)

    spec = load_workflow(args.spec, require_full_pipeline=False)
    try:
        app = spec.application(args.app)
    except KeyError:
        print(f"no application {args.app!r} in {args.spec}", file=sys.stderr)
        return 2

    sender = SocketSender(_parse_addr(args.store), args.run)
    companion = Companion(
        app,
        args.run,
        sender,
        trace_addr=os.environ.get("COPILOT_TRACE_ADDR"),
        sample_interval_ms=spec.run_defaults.sample_interval_ms,
        workdir=Path(args.workdir),
        capture_dir=Path(args.capture_dir) if args.capture_dir else None,
    )

    # Forward a termination request to the child instead of dying with it.
    def _on_term(signum, frame):
        companion.terminate()

    signal.signal(signal.SIGTERM, _on_term)
    signal.signal(signal.SIGINT, _on_term)

    try:
        companion.launch()
    except LaunchError:
        sender.close()
        return 1
    companion.await_exit()
    sender.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
