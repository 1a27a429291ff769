"""Post-run reporting: delimited series extracted from a run's event log plus
rendered figures, written side by side into a report directory.

Covers the operator-facing artifacts: per-application resource timelines,
channel throughput, the health-verdict timeline, the checklist table, and the
chaos experiment's empirical-versus-predicted failure rate.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .chaos import MeasureResult  # noqa: E402
from .store import EventStore, Query  # noqa: E402

FIGSIZE = (9, 4.5)
DPI = 120


def _rel_s(ev, t0_ms: int) -> float:
    return (ev.ts_wall - t0_ms) / 1000.0


def write_run_report(store: EventStore, run_id: str, out_dir: Path | str) -> list[Path]:
    """Extract the run's series to CSV and render figures; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    events = store.query(Query(run_id=run_id))
    if not events:
        raise ValueError(f"run {run_id!r} has no events")
    t0 = events[0].ts_wall
    written: list[Path] = []

    resources: dict[str, list[tuple[float, int, int]]] = {}
    beats: dict[str, list[tuple[float, int]]] = {}
    io: dict[str, list[tuple[float, int]]] = {}
    verdicts: list[tuple[float, str, str, str]] = []
    checks: list[tuple[str, str, str, float]] = []
    for ev in events:
        f = ev.fields
        t = _rel_s(ev, t0)
        if ev.kind == "resource":
            resources.setdefault(ev.source, []).append(
                (t, f.get("rss_bytes", 0), f.get("cpu_time_ms", 0)))
        elif ev.kind == "heartbeat":
            beats.setdefault(ev.source, []).append((t, f.get("iteration", 0)))
        elif ev.kind == "io_stat":
            io.setdefault(f.get("channel", "?"), []).append((t, f.get("bytes", 0)))
        elif ev.kind == "verdict":
            verdicts.append((t, f.get("subject_kind", "?"), str(f.get("subject")),
                             f.get("status", "?")))
        elif ev.kind == "stage" and f.get("event") == "check":
            checks.append((f.get("stage", "?"), f.get("check_id", "?"),
                           f.get("outcome", "?"), f.get("duration_ms", 0.0)))

    written.append(_csv(out / "resources.csv",
                        ["t_s", "app", "rss_bytes", "cpu_time_ms"],
                        [(t, app, rss, cpu)
                         for app, rows in sorted(resources.items())
                         for t, rss, cpu in rows]))
    written.append(_csv(out / "heartbeats.csv", ["t_s", "app", "iteration"],
                        [(t, app, it)
                         for app, rows in sorted(beats.items()) for t, it in rows]))
    written.append(_csv(out / "throughput.csv", ["t_s", "channel", "bytes"],
                        [(t, ch, b) for ch, rows in sorted(io.items()) for t, b in rows]))
    written.append(_csv(out / "verdicts.csv", ["t_s", "subject_kind", "subject", "status"],
                        verdicts))
    written.append(_csv(out / "checks.csv", ["stage", "check_id", "outcome", "duration_ms"],
                        checks))

    if resources:
        fig, (ax_rss, ax_cpu) = plt.subplots(2, 1, figsize=(FIGSIZE[0], 7), sharex=True)
        for app, rows in sorted(resources.items()):
            ts = [r[0] for r in rows]
            ax_rss.plot(ts, [r[1] / 2**20 for r in rows], label=app)
            ax_cpu.plot(ts, [r[2] / 1000.0 for r in rows], label=app)
        ax_rss.set_ylabel("RSS [MiB]")
        ax_cpu.set_ylabel("CPU time [s]")
        ax_cpu.set_xlabel("run time [s]")
        ax_rss.legend(fontsize=8)
        ax_rss.set_title(f"{run_id}: application resources")
        written.append(_save(fig, out / "resources.png"))

    if io:
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for ch, rows in sorted(io.items()):
            ts = [r[0] for r in rows]
            cumulative = []
            total = 0
            for _, b in rows:
                total += b
                cumulative.append(total / 2**20)
            ax.plot(ts, cumulative, label=ch)
        ax.set_xlabel("run time [s]")
        ax.set_ylabel("cumulative channel volume [MiB]")
        ax.legend(fontsize=8)
        ax.set_title(f"{run_id}: channel traffic")
        written.append(_save(fig, out / "throughput.png"))

    if verdicts or beats:
        fig, ax = plt.subplots(figsize=FIGSIZE)
        subjects = sorted({f"{k}:{s}" for _, k, s, _ in verdicts})
        colors = {"healthy": "tab:green", "starting": "tab:blue", "stalled": "tab:red",
                  "dead": "black", "unknown": "tab:gray", "timed_out": "tab:orange",
                  "duplicate_ack": "tab:purple"}
        for i, subj in enumerate(subjects):
            pts = [(t, status) for t, k, s, status in verdicts if f"{k}:{s}" == subj]
            ax.scatter([p[0] for p in pts], [i] * len(pts),
                       c=[colors.get(p[1], "tab:brown") for p in pts], s=28)
        ax.set_yticks(range(len(subjects)))
        ax.set_yticklabels(subjects, fontsize=8)
        ax.set_xlabel("run time [s]")
        ax.set_title(f"{run_id}: verdict timeline")
        written.append(_save(fig, out / "timeline.png"))

    return written


def write_chaos_report(result: MeasureResult, out_dir: Path | str) -> list[Path]:
    """Summary CSV plus a figure comparing empirical and predicted failure rates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [_csv(out / "chaos_summary.csv",
                    ["trials", "failures", "empirical_rate", "predicted_rate",
                     "abs_difference", "probability", "seed"],
                    [(result.trials, result.failures, result.empirical_rate,
                      result.predicted_rate, result.abs_difference,
                      result.probability, result.seed)])]

    fig, ax = plt.subplots(figsize=(6, 4.5))
    # ~99% binomial interval around the empirical estimate
    if result.trials:
        sigma = math.sqrt(max(result.empirical_rate * (1 - result.empirical_rate), 1e-12)
                          / result.trials)
    else:
        sigma = 0.0
    ax.bar(["empirical", "predicted"], [result.empirical_rate, result.predicted_rate],
           color=["tab:blue", "tab:orange"], width=0.5,
           yerr=[2.58 * sigma, 0], capsize=6)
    ax.set_ylim(0, max(result.empirical_rate, result.predicted_rate, 0.01) * 1.3)
    ax.set_ylabel("system failure rate")
    ax.set_title(f"p={result.probability}, n={result.trials} trials, "
                 f"|diff|={result.abs_difference:.4f}")
    written.append(_save(fig, out / "failure_rate.png"))
    return written


def _csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path
