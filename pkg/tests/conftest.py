import pytest
import torch

from cisper.toy import toy_fixture


@pytest.fixture(autouse=True)
def _single_thread():
    # deterministic reductions on the 1-core CI box
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def toy():
    return toy_fixture()


@pytest.fixture(scope="session")
def small_toy():
    """Four short conversations; enough for plumbing checks."""
    return toy_fixture(n_conversations=4, length=3)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
