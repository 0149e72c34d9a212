import numpy as np
import pytest

from poisonlab.envlab import MdpSpec, build_env, generate_dataset, value_iteration_oracle
from poisonlab.victims import TrainConfig, default_feature_map, train_linear_fqi, train_tabular_q


@pytest.fixture(scope="session")
def line_spec():
    return MdpSpec.lineworld()


@pytest.fixture(scope="session")
def line_env(line_spec):
    return build_env(line_spec)


@pytest.fixture(scope="session")
def line_oracle(line_spec):
    return value_iteration_oracle(line_spec)


@pytest.fixture(scope="session")
def line_data(line_env, line_oracle):
    return generate_dataset(line_env, 3000, "medium", seed=1, oracle=line_oracle)


@pytest.fixture(scope="session")
def line_model(line_data):
    return train_linear_fqi(line_data, TrainConfig())


@pytest.fixture(scope="session")
def grid_spec():
    return MdpSpec.gridworld(slip_prob=0.1)


@pytest.fixture(scope="session")
def grid_env(grid_spec):
    return build_env(grid_spec)


@pytest.fixture(scope="session")
def grid_oracle(grid_spec):
    return value_iteration_oracle(grid_spec)


@pytest.fixture(scope="session")
def grid_data(grid_env, grid_oracle):
    return generate_dataset(grid_env, 3000, "medium", seed=2, oracle=grid_oracle)


@pytest.fixture(scope="session")
def grid_model(grid_data):
    return train_tabular_q(grid_data, TrainConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
