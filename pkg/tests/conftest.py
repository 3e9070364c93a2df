import time

import pytest

from etherkit import harness as H


@pytest.fixture(scope="session")
def task():
    return H.TaskSpec()


@pytest.fixture(scope="session")
def pretrained(task):
    return H.make_pretrained(task)


@pytest.fixture(scope="session")
def reference():
    """The three-seed reference lr sweep over all five methods, with its wall time."""
    start = time.perf_counter()
    result = H.reference_sweep()
    return result, time.perf_counter() - start


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
