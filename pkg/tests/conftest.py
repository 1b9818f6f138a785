import pytest

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    store = request.config.stash[VERDICTS]

    def record(number, title, ok, detail):
        store[number] = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
        print(store[number])
        assert ok, store[number]

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash[VERDICTS]
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
