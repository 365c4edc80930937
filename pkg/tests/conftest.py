import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one "criterion N: PASS/FAIL ..." line per acceptance check."""
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
