import pytest

from bpre.env_model import EnvModel

ENV_A = EnvModel(([0, 0, 1], [0, 0, 0, 1]), [0.5, 0.5])
ENV_B = EnvModel(([0, 0.3, 0.7], [0, 0.1, 0.9]), [0.5, 0.5])
ENV_C = EnvModel(([0, 0, 0.5, 0.5], [0, 0, 1]), [0.5, 0.5])
HALF_HALF = EnvModel.single([0, 0.5, 0.5])

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def env_a():
    return ENV_A


@pytest.fixture
def env_b():
    return ENV_B


@pytest.fixture
def env_c():
    return ENV_C


@pytest.fixture
def half_half():
    return HALF_HALF


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
