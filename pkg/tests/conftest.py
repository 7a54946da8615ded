import pytest

# (criterion number, title, passed, detail) filled in by the acceptance tests
ACCEPTANCE: list[tuple[int, str, bool, str]] = []
REPORTS: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE.append((number, title, bool(passed), detail))
        assert passed, f"criterion {number} ({title}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        tr.write_line(f"{'PASS' if passed else 'FAIL'}  [{number}] {title}: {detail}")
    for text in REPORTS:
        tr.write_line("")
        tr.write_line(text)
