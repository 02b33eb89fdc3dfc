import pytest

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one summary line per acceptance criterion; printed at the end of the run."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}"
        print(ACCEPTANCE[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
