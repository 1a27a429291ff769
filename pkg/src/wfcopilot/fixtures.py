"""Bundled desk-scale workflow fixtures.

Two topologies ship with the package: a three-simulator pipeline with analysis
and an in-transit visualization sink, and a closed-loop simulator/robot/learner
workflow with a tight time-critical link. ``materialize`` copies a fixture
workspace (workflow file, mock behaviors, config/data stand-ins) to a writable
directory so runs and chaos experiments can damage their own copy.
"""

from __future__ import annotations

import importlib.resources
import shutil
from pathlib import Path

from .model import WorkflowSpec, load_workflow

USECASES = ("usecase1", "usecase2")


def fixture_root(name: str):
    if name not in USECASES:
        raise KeyError(f"unknown fixture {name!r}; have {USECASES}")
    return importlib.resources.files("wfcopilot") / "fixtures" / name


def materialize(name: str, dest: Path | str) -> Path:
    """Copy the fixture workspace into ``dest`` and return the workflow path."""
    dest = Path(dest)
    root = fixture_root(name)
    with importlib.resources.as_file(root) as src:
        shutil.copytree(src, dest, dirs_exist_ok=True)
    (dest / "out").mkdir(exist_ok=True)
    return dest / "workflow.yaml"


def load_fixture(name: str) -> WorkflowSpec:
    root = fixture_root(name)
    return load_workflow(str(root / "workflow.yaml"))


def fixture_usecase1() -> WorkflowSpec:
    """Three coupled simulators feeding analysis and a visualization sink."""
    return load_fixture("usecase1")


def fixture_usecase2() -> WorkflowSpec:
    """Closed loop: simulator and robot on a time-critical link, tuned by a learner."""
    return load_fixture("usecase2")
