import re

import numpy as np
import pytest

from aggdp.aggregation import build_hard_aggregation
from aggdp.mdp import two_state

_ACCEPTANCE = {}
_NOTES = {}


@pytest.fixture
def ts():
    return two_state()


@pytest.fixture
def ts_loop():
    return two_state(self_loop=True)


@pytest.fixture
def single_cell():
    return build_hard_aggregation([[0, 1]], 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def note(request):
    """Attach a measurement line to this criterion's summary entry."""
    m = re.search(r"test_criterion_(\d+)", request.node.name)
    key = int(m.group(1)) if m else 0

    def add(line):
        _NOTES.setdefault(key, []).append(str(line))

    return add


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    k = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[k] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        verdict = "PASS" if _ACCEPTANCE[k] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {k:2d}: {verdict}")
        for line in _NOTES.get(k, []):
            terminalreporter.write_line(f"    {line}")
