import pytest

_RESULTS = []


@pytest.fixture
def acceptance():
    """Record one acceptance criterion: acceptance(number, name, ok, detail, seconds)."""

    def record(number, name, ok, detail, seconds):
        _RESULTS.append((number, name, ok, detail, seconds))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail, seconds in sorted(_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:2d}. {name} ({seconds:.1f}s): {detail}")
