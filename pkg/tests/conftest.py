import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; call before asserting."""
    def record(cid: str, passed: bool, detail: str) -> bool:
        _VERDICTS.append(f"[{'PASS' if passed else 'FAIL'}] {cid} {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
