import pytest

ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def verdict(request):
    """Record a one-line verdict for an acceptance criterion, then assert it."""

    def record(criterion: int, ok: bool, detail: str):
        ACCEPTANCE_LINES[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[criterion])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
