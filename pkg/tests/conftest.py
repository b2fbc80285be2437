import pytest

# criterion number -> (title, passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}; {detail}")


@pytest.fixture
def record():
    def _record(n, title, ok, detail=""):
        ACCEPTANCE[n] = (title, bool(ok), detail)
        print(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}; {detail}")
        return ok
    return _record
