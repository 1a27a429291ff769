"""Deterministic mock applications for desk-scale workflow runs.

A mock runs a fixed iteration loop: exchanges bytes on its channels, emits a
heartbeat every N steps, answers steering commands, writes one log line per
step, and exits with its planned code. Behaviour is fully determined by the
behavior file; misbehaviour (going silent, ignoring steering, early exit) is
opt-in configuration, and the runtime can flip the same switches mid-run
through underscore-prefixed control commands.

Channel transport is a local stream socket with 4-byte length-prefixed frames;
only observability matters here, not the data.
"""

from __future__ import annotations

import argparse
import os
import socket
import struct
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty, Queue

import yaml

from .tracepoints import Emitter

CHANNEL_ERROR_EXIT = 21
CONNECT_ATTEMPTS = 30
CONNECT_DELAY_S = 0.2
FRAME_HEADER = struct.Struct(">I")


@dataclass(frozen=True)
class ChannelBinding:
    name: str
    role: str  # listen | connect
    bytes_per_step: int = 0
    echo: bool = False
    send_until_step: int | None = None  # stop sending early so listeners outlive senders


@dataclass(frozen=True)
class MockBehavior:
    iterations: int = 50
    step_ms: int = 20
    heartbeat_every: int = 5  # 0 disables heartbeats
    exit_code: int = 0
    channels: tuple[ChannelBinding, ...] = ()
    steering_handlers: tuple[str, ...] = ()
    steering_channel: str | None = None
    silence_after_step: int | None = None
    ignore_steering: bool = False
    exit_at_step: int | None = None

    @staticmethod
    def from_doc(doc: dict) -> "MockBehavior":
        mis = doc.get("misbehavior") or {}
        channels = tuple(
            ChannelBinding(
                name=c["name"],
                role=c.get("role", "connect"),
                bytes_per_step=int(c.get("bytes_per_step", 0)),
                echo=bool(c.get("echo", False)),
                send_until_step=c.get("send_until_step"),
            )
            for c in doc.get("channels") or []
        )
        b = MockBehavior(
            iterations=int(doc.get("iterations", 50)),
            step_ms=int(doc.get("step_ms", 20)),
            heartbeat_every=int(doc.get("heartbeat_every", 5)),
            exit_code=int(doc.get("exit_code", 0)),
            channels=channels,
            steering_handlers=tuple(doc.get("steering_handlers") or ()),
            steering_channel=doc.get("steering_channel"),
            silence_after_step=mis.get("silence_after_step"),
            ignore_steering=bool(mis.get("ignore_steering", False)),
            exit_at_step=mis.get("exit_at_step"),
        )
        if b.step_ms < 1:
            raise ValueError("step_ms must be >= 1")
        return b

    def to_doc(self) -> dict:
        return {
            "iterations": self.iterations,
            "step_ms": self.step_ms,
            "heartbeat_every": self.heartbeat_every,
            "exit_code": self.exit_code,
            "channels": [
                {"name": c.name, "role": c.role, "bytes_per_step": c.bytes_per_step,
                 "echo": c.echo, "send_until_step": c.send_until_step}
                for c in self.channels
            ],
            "steering_handlers": list(self.steering_handlers),
            "steering_channel": self.steering_channel,
            "misbehavior": {
                "silence_after_step": self.silence_after_step,
                "ignore_steering": self.ignore_steering,
                "exit_at_step": self.exit_at_step,
            },
        }


def load_behavior(path) -> MockBehavior:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh.read()) or {}
    return MockBehavior.from_doc(doc)


def channel_addr_env(channel: str) -> str:
    return "COPILOT_CHANNEL_" + channel.upper().replace("-", "_").replace(".", "_")


def _resolve_addr(channel: str, env) -> tuple[str, int]:
    raw = env.get(channel_addr_env(channel))
    if not raw:
        raise KeyError(f"no address for channel {channel!r} ({channel_addr_env(channel)})")
    host, _, port = raw.rpartition(":")
    return host or "127.0.0.1", int(port)


class _Channel:
    """One live channel endpoint; sockets are set up before the loop starts."""

    def __init__(self, binding: ChannelBinding, addr: tuple[str, int]):
        self.binding = binding
        self.addr = addr
        self.sock: socket.socket | None = None
        self.muted = False
        self._server: socket.socket | None = None
        self._peer_ready = threading.Event()
        self._reader: threading.Thread | None = None
        self._echo_queue: Queue = Queue()

    def open(self) -> None:
        if self.binding.role == "listen":
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind(self.addr)
            srv.listen(4)
            self._server = srv
            threading.Thread(target=self._accept_loop, daemon=True,
                             name=f"ch-accept-{self.binding.name}").start()
        else:
            last_err: OSError | None = None
            for _ in range(CONNECT_ATTEMPTS):
                try:
                    self.sock = socket.create_connection(self.addr, timeout=2.0)
                    break
                except OSError as exc:
                    last_err = exc
                    time.sleep(CONNECT_DELAY_S)
            if self.sock is None:
                raise ConnectionError(
                    f"channel {self.binding.name}: peer unreachable at {self.addr}: {last_err}"
                )
            self._peer_ready.set()
            self._reader = threading.Thread(target=self._drain_loop, daemon=True,
                                            name=f"ch-read-{self.binding.name}")
            self._reader.start()

    def _accept_loop(self) -> None:
        while self._server is not None:
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            self.sock = conn
            self._peer_ready.set()
            threading.Thread(target=self._drain_loop, args=(conn,), daemon=True,
                             name=f"ch-read-{self.binding.name}").start()

    def _drain_loop(self, conn: socket.socket | None = None) -> None:
        sock = conn or self.sock
        try:
            while True:
                header = _read_exact(sock, FRAME_HEADER.size)
                if header is None:
                    return
                (length,) = FRAME_HEADER.unpack(header)
                payload = _read_exact(sock, length)
                if payload is None:
                    return
                if self.binding.echo and self.binding.bytes_per_step == 0:
                    # responder side of a round-trip channel: reflect the frame
                    try:
                        sock.sendall(header + payload)
                    except OSError:
                        return
                elif self.binding.echo:
                    self._echo_queue.put(payload)
        except OSError:
            return

    def send_step(self) -> int | None:
        """Send one step's frame; returns round-trip latency in us for echo
        channels, else None. Raises on a dead peer."""
        if self.muted or self.binding.bytes_per_step <= 0:
            return None
        if not self._peer_ready.wait(timeout=CONNECT_ATTEMPTS * CONNECT_DELAY_S):
            raise ConnectionError(f"channel {self.binding.name}: no peer connected")
        payload = b"\0" * self.binding.bytes_per_step
        t0 = time.monotonic_ns()
        self.sock.sendall(FRAME_HEADER.pack(len(payload)) + payload)
        if self.binding.echo:
            try:
                self._echo_queue.get(timeout=5.0)
            except Empty:
                raise ConnectionError(f"channel {self.binding.name}: echo timed out")
            return (time.monotonic_ns() - t0) // 1000
        return None

    def close(self) -> None:
        for s in (self.sock, self._server):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass
        self._server = None


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class MockApp:
    """The step loop plus its concurrent steering listener."""

    def __init__(self, behavior: MockBehavior, run_id: str, app_name: str,
                 trace_addr: tuple[str, int] | None, env=None):
        self.behavior = behavior
        self.app_name = app_name
        self.env = env if env is not None else os.environ
        self.emitter = Emitter(run_id, app_name, trace_addr,
                               sink=lambda line: print(line, flush=True))
        self.emitter.on_steer = self._enqueue_steer
        self._steer_queue: Queue = Queue()
        self._silenced = behavior.silence_after_step is not None and behavior.silence_after_step <= 0
        self._exit_requested: int | None = None
        self._rate = 1.0  # step pacing factor, adjustable via set_rate
        self.channels: list[_Channel] = []

    def _enqueue_steer(self, cmd: dict) -> None:
        self._steer_queue.put(cmd)

    # -- steering ---------------------------------------------------------------

    def _process_steering(self) -> None:
        while True:
            try:
                cmd = self._steer_queue.get_nowait()
            except Empty:
                return
            verb = cmd.get("verb", "")
            cid = cmd.get("command_id", "")
            args = cmd.get("args") or {}
            if verb.startswith("_"):
                self._apply_control(verb, args, cid)
                continue
            if self.behavior.ignore_steering:
                continue  # deliberately unresponsive
            if verb in self.behavior.steering_handlers:
                self._apply_operator_verb(verb, args)
                self.emitter.steer_ack(cid, "applied")
            else:
                self.emitter.steer_ack(cid, "rejected")
            if self.behavior.steering_channel:
                self.emitter.io_stat(self.behavior.steering_channel,
                                     max(1, len(str(cmd))))

    def _apply_control(self, verb: str, args: dict, cid: str) -> None:
        """Runtime control plane: always honored, even by ignore_steering mocks."""
        if verb == "_ping":
            self.emitter.steer_ack(cid, "applied")
            if self.behavior.steering_channel:
                self.emitter.io_stat(self.behavior.steering_channel, 8)
        elif verb == "_silence_heartbeats":
            self._silenced = True
            self.emitter.steer_ack(cid, "applied")
        elif verb == "_mute_channel":
            name = args.get("channel")
            for ch in self.channels:
                if ch.binding.name == name:
                    ch.muted = True
            self.emitter.steer_ack(cid, "applied")
        elif verb == "_exit":
            self._exit_requested = int(args.get("code", 1))
            self.emitter.steer_ack(cid, "applied")
        else:
            self.emitter.steer_ack(cid, "rejected")

    def _apply_operator_verb(self, verb: str, args: dict) -> None:
        if verb == "set_rate":
            factor = float(args.get("factor", 1.0))
            if factor > 0:
                self._rate = factor

    # -- loop ---------------------------------------------------------------------

    def run(self) -> int:
        b = self.behavior
        for binding in b.channels:
            addr = _resolve_addr(binding.name, self.env)
            self.channels.append(_Channel(binding, addr))
        try:
            for ch in self.channels:
                ch.open()
        except (ConnectionError, OSError) as exc:
            print(f"channel setup failed: {exc}", file=sys.stderr, flush=True)
            return CHANNEL_ERROR_EXIT

        self.emitter.progress("loop")
        rc = b.exit_code
        try:
            for step in range(1, b.iterations + 1):
                time.sleep(b.step_ms / 1000.0 / self._rate)
                self._process_steering()
                if self._exit_requested is not None:
                    rc = self._exit_requested
                    break
                for ch in self.channels:
                    until = ch.binding.send_until_step
                    if until is not None and step > until:
                        continue
                    try:
                        latency = ch.send_step()
                    except (ConnectionError, OSError) as exc:
                        # peer finished first: stop using the channel, keep running
                        print(f"channel {ch.binding.name} peer gone at step {step}: {exc}",
                              file=sys.stderr, flush=True)
                        ch.muted = True
                        continue
                    if ch.binding.bytes_per_step > 0 and not ch.muted:
                        self.emitter.io_stat(ch.binding.name, ch.binding.bytes_per_step,
                                             latency_us=latency)
                if b.silence_after_step is not None and step >= b.silence_after_step:
                    self._silenced = True
                if b.heartbeat_every > 0 and step % b.heartbeat_every == 0 and not self._silenced:
                    self.emitter.heartbeat(step)
                print(f"step={step} t={step * b.step_ms / 1000.0:.3f}", flush=True)
                if b.exit_at_step is not None and step >= b.exit_at_step:
                    break
        finally:
            self.emitter.progress("done")
            self.emitter.close()
            for ch in self.channels:
                ch.close()
        return rc


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="copilot-mock",
                                     description="deterministic mock workflow application")
    parser.add_argument("--behavior", required=True)
    args = parser.parse_args(argv)

    behavior = load_behavior(Path(args.behavior))
    run_id = os.environ.get("COPILOT_RUN_ID", "local")
    app_name = os.environ.get("COPILOT_APP", "mock")
    trace_raw = os.environ.get("COPILOT_TRACE_ADDR", "")
    trace_addr: tuple[str, int] | None = None
    if trace_raw:
        host, _, port = trace_raw.rpartition(":")
        trace_addr = (host or "127.0.0.1", int(port))

    app = MockApp(behavior, run_id, app_name, trace_addr)
    return app.run()


if __name__ == "__main__":
    sys.exit(main())
