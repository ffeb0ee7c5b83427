import time

import pytest

_LINES = []


class Criterion:
    """Times one acceptance criterion and records its pass/fail line."""

    def __init__(self, number: int, title: str, limit: float):
        self.number, self.title, self.limit = number, title, limit
        self.start = time.perf_counter()

    def finish(self, passed: bool, detail: str) -> bool:
        elapsed = time.perf_counter() - self.start
        in_time = elapsed < self.limit
        ok = bool(passed) and in_time
        timing = f"{elapsed:.1f}s (limit {self.limit:.0f}s)"
        _LINES.append((self.number, f"{'PASS' if ok else 'FAIL'} [{self.number:>2}] {self.title}: {detail}; {timing}"))
        print(_LINES[-1][1])
        return ok


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
