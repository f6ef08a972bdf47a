import contextlib
from pathlib import Path

import pytest

from nilmlab.meter import MeterClock, MeterService, ScenarioSource, VirtualMeter

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
FIXTURES = ROOT / "fixtures"

ACCEPTANCE_LINES = []


@pytest.fixture
def scenarios_dir():
    return SCENARIOS


@contextlib.contextmanager
def running_meter(scenario, accel=60.0, exit_at_end=False):
    service = MeterService(VirtualMeter(ScenarioSource(scenario)), MeterClock(accel),
                           ("127.0.0.1", 0), exit_at_end=exit_at_end)
    service.start()
    try:
        yield service
    finally:
        service.stop()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
