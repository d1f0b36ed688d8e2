import pytest

_RESULTS = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the terminal summary prints every recorded line."""
    def record(number, title, passed, detail):
        _RESULTS.append((number, title, passed, detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_RESULTS):
        terminalreporter.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
