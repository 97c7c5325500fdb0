import pytest

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list = []


@pytest.fixture
def record_acceptance():
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {title}" + (f" | {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
