import pytest

_LINES: list[str] = []


class CriterionLog:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def record(self, label: str, passed: bool, detail: str = "") -> bool:
        _LINES.append(f"{'PASS' if passed else 'FAIL'}  criterion {label}: {detail}")
        return passed


@pytest.fixture(scope="session")
def criterion() -> CriterionLog:
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
