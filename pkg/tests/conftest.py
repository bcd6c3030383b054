import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, title, ok, detail)``."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number:2d} [{title}]: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f"  ({detail})"
        results[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
