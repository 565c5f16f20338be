import pytest

ACCEPTANCE = {}


def record(number, title, passed, detail=""):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {title}  {detail}")


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{n:2d}. {'PASS' if ok else 'FAIL'}  {title}  {detail}")
