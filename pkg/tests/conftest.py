import numpy as np
import pytest
import torch

_TITLES: dict[int, str] = {}
_NODES: dict[str, int] = {}
_OUTCOMES: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            n, title = m.args
            _TITLES[n] = title
            _NODES[item.nodeid] = n
            _OUTCOMES.setdefault(n, [])


def pytest_runtest_logreport(report):
    n = _NODES.get(report.nodeid)
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES[n].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _TITLES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_TITLES):
        outcomes = _OUTCOMES[n]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {_TITLES[n]} ({len(outcomes)} checks)")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
