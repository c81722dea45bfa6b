import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; the test still asserts on its own."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
