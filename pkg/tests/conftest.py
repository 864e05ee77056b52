import time

import pytest

_LINES = []


class _Criterion:
    def __init__(self, number, title, budget_s):
        self.number, self.title, self.budget_s = number, title, budget_s
        self.started = time.monotonic()

    def report(self, ok, detail):
        elapsed = time.monotonic() - self.started
        in_budget = elapsed < self.budget_s
        status = "PASS" if ok and in_budget else "FAIL"
        line = f"criterion {self.number} {status}: {self.title} | {detail} | {elapsed:.1f}s (budget {self.budget_s:g}s)"
        _LINES.append(line)
        print(line)
        assert ok, line
        assert in_budget, line


@pytest.fixture
def criterion():
    """``criterion(n, title, budget_s)`` starts a timer; ``.report(ok, detail)`` records the verdict."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
