import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record an acceptance outcome; ``part`` splits one criterion across several tests."""
    store = request.config.stash[_RESULTS]

    def record(number, ok, detail, part=None):
        store.setdefault(int(number), []).append((bool(ok), f"[{part}] {detail}" if part else detail))
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_RESULTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        parts = store[number]
        ok = all(p[0] for p in parts)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  "
                                    + "; ".join(p[1] for p in parts))
