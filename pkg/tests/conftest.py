import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion_log(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    log = request.config.stash.setdefault(CRITERIA, {})

    def record(number, name, passed, detail):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        log[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(CRITERIA, {})
    if log:
        terminalreporter.section("acceptance criteria")
        for number in sorted(log):
            terminalreporter.write_line(log[number])
