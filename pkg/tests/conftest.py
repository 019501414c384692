import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record a one-line acceptance verdict; all lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def emit(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        lines.append(line)
        print(line, flush=True)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
