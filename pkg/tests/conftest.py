import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def accept(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``accept(name, ok, detail)``; the line is also echoed in the
    terminal summary so it survives output capture.
    """

    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
