import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _fresh_tape():
    """Each test starts and ends with an empty global tape."""
    from tridistill.tensor import active_tape

    active_tape().clear()
    yield
    active_tape().clear()


# The end-to-end suite appends one verdict line per check; echoing them
# after the summary keeps them visible even with output capture on.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance verdicts")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
