import pytest

# criterion lines recorded by the acceptance tests, echoed after the run
CRITERIA = []


@pytest.fixture
def criterion(capsys):
    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
        CRITERIA.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(CRITERIA):
            terminalreporter.write_line(line)
