import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


@pytest.fixture
def report():
    """Record one status line per acceptance criterion for the terminal summary."""

    def record(number: int, status: str, detail: str) -> None:
        _RESULTS[number] = (status, detail)
        print(f"criterion {number}: {status}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail = _RESULTS[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {detail}")
