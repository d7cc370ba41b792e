import numpy as np
import pytest

from sdglab.problem import builtin_spec

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ms1():
    return builtin_spec("ms1")


@pytest.fixture(scope="session")
def ms2():
    return builtin_spec("ms2")


@pytest.fixture
def x0():
    return np.array([2.0, 0.0])
