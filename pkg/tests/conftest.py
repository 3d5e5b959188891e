import numpy as np
import pytest

_RESULTS_KEY = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.stash[_RESULTS_KEY] = []


@pytest.fixture
def report(request):
    """Record one acceptance line: report(n, status, detail)."""

    def record(n, status, detail=""):
        line = f"criterion {n:>2}: {status:<4} {detail}".rstrip()
        request.config.stash[_RESULTS_KEY].append((n, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_RESULTS_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
