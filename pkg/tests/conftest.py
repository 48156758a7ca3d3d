import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict(request):
    """Call with (ok, detail); records one PASS/FAIL line for the test's criterion."""

    def record(ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {request.node.name}: {detail}"
        VERDICTS.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
