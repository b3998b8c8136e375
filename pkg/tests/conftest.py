import pytest

# one line per acceptance criterion, printed at the end of the session
_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str, seconds: float, budget: float):
        ok = passed and seconds < budget
        _ACCEPTANCE[number] = (f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}  "
                               f"[{seconds:.1f} s of {budget:.0f} s]")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
