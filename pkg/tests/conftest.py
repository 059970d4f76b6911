import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture(scope="session")
def record_criterion():
    """record_criterion(number, title, ok, detail) for the acceptance summary."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        _CRITERIA[number] = (title, bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"{'PASS' if ok else 'FAIL'}  [{number}] {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
