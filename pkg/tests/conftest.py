import pytest

_VERDICTS: list = []


@pytest.fixture
def criterion():
    """Record a named acceptance verdict, then assert it."""

    def record(name: str, ok: bool, detail: str = ""):
        _VERDICTS.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
