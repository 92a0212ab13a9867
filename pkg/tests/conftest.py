import time

import pytest

_RESULTS: list[str] = []


class Criterion:
    """Context manager that records one PASS/FAIL line for an acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.notes = number, title, []

    def note(self, text: str) -> None:
        self.notes.append(text)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        verdict = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.notes + ([f"{exc_type.__name__}: {exc}".splitlines()[0]] if exc_type else []))
        line = f"{verdict} [{self.number:2d}] {self.title} ({time.perf_counter() - self.t0:.1f}s) {detail}".rstrip()
        _RESULTS.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
