import pytest

_ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def _report(criterion: int, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {criterion:>2}: {detail}"
        _ACCEPTANCE[criterion] = line
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[key])
