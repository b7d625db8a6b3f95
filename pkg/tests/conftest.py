import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one summary line per acceptance criterion."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
