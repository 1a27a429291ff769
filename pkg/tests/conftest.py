import logging

import pytest

from wfcopilot.store import EventStore


@pytest.fixture
def store(tmp_path):
    s = EventStore(tmp_path / "runs")
    yield s
    s.close()


@pytest.fixture
def mem_store():
    s = EventStore(None)
    yield s
    s.close()


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
