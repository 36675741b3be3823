import numpy as np
import pytest

from ssrnas import archspace, bench


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny():
    return archspace.tiny_space()


@pytest.fixture(scope="session")
def small_task():
    """A few samples of the default task, enough for forward passes."""
    return bench.gen_task(bench.TaskConfig(n_train=16, n_val=8, n_test=8))


# PASS/FAIL lines of the acceptance criteria, printed again at the end of the run
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
