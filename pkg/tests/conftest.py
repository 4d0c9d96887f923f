import numpy as np
import pytest

from gekf.model import bundled_system

_CRITERIA: dict[str, list[str]] = {}


@pytest.fixture(scope="session")
def ex1():
    return bundled_system("example1")


@pytest.fixture(scope="session")
def ex2():
    return bundled_system("example2")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    outcomes = _CRITERIA.setdefault(props["criterion"], [])
    if report.when == "call" or report.outcome != "passed":
        outcomes.append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: int(s.split(".")[0])):
        ok = all(o == "passed" for o in _CRITERIA[label])
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {label}")
