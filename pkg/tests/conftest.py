import pytest

VERDICTS: list[tuple[str, str, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance verdict, print it, and fail the test if it did not pass."""

    def record(criterion: str, ok: bool, detail: str = "", label: str | None = None) -> None:
        label = label or ("PASS" if ok else "FAIL")
        VERDICTS.append((criterion, label, detail))
        print(f"{criterion}: {label} {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, label, detail in sorted(VERDICTS, key=lambda v: int(v[0].split()[-1])):
        terminalreporter.write_line(f"{criterion:<13} {label:<11} {detail}")
