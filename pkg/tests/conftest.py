import contextlib
import time

import pytest

ACCEPTANCE_LINES: list[str] = []


class CriterionRecord:
    def __init__(self):
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture
def criterion():
    """``with criterion(n, title, budget_s) as rec:`` records one PASS/FAIL line."""

    @contextlib.contextmanager
    def _run(number: int, title: str, budget_s: float, soft: bool = False):
        rec = CriterionRecord()
        t0 = time.perf_counter()
        status, err = "PASS", None
        try:
            yield rec
        except AssertionError as exc:
            status, err = "FAIL", exc
        elapsed = time.perf_counter() - t0
        if status == "PASS" and elapsed > budget_s:
            status, err = "FAIL", AssertionError(f"runtime {elapsed:.1f}s exceeds budget {budget_s:.0f}s")
        if soft:
            status = f"REPORT ({'met' if status == 'PASS' else 'not met'})"
        detail = "; ".join(rec.details)
        if err is not None:
            detail = f"{detail}; {str(err).splitlines()[0]}" if detail else str(err).splitlines()[0]
        line = f"criterion {number} {status}: {title} [{elapsed:.1f}s] {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        if err is not None and not soft:
            raise err

    return _run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
