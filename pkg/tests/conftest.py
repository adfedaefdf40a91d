import pytest

from snspdsim.config import default_config

# Lines recorded by test_acceptance.py; echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def params(cfg):
    return cfg.physics


@pytest.fixture(scope="session")
def chain(cfg):
    return cfg.chain


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
