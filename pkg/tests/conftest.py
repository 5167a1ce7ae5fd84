import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def emit(number, label, ok, detail=""):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip()
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
