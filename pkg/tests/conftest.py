import numpy as np
import pytest

ACCEPTANCE_LINES = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = ""):
    """Remember one acceptance verdict for the end-of-run summary."""
    ACCEPTANCE_LINES[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        title, ok, detail = ACCEPTANCE_LINES[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}" + (f" -- {detail}" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
