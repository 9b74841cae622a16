import numpy as np
import pytest

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((criterion, "PASS" if passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, status, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {crit}: {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
