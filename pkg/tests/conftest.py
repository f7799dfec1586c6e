import pytest

# (criterion, status, detail) lines recorded by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, str]] = []


@pytest.fixture
def record():
    def _record(criterion: int, status: str, detail: str) -> None:
        ACCEPTANCE.append((criterion, status, detail))
        print(f"ACCEPTANCE {criterion:2d} {status}: {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in sorted(ACCEPTANCE, key=lambda x: x[0]):
        terminalreporter.write_line(f"[{status}] criterion {criterion}: {detail}")
