import pytest

from conceptope.concepts import feature_table
from conceptope.core import Batch, rollout_batch
from conceptope.envs import Gridworld, train_q_policies

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def gridworld():
    return Gridworld()


@pytest.fixture(scope="session")
def policies(gridworld):
    return train_q_policies(gridworld, 1000, snapshot_fracs=(0.5,), temperature=3.0, seed=0)


@pytest.fixture(scope="session")
def splits(gridworld, policies):
    """400/50/50 train/val/test batches under the behaviour policy."""
    trajs = rollout_batch(gridworld.mdp, policies[0], 500, seed=7)
    h = gridworld.horizon
    return Batch(trajs[:400], horizon=h), Batch(trajs[400:450], horizon=h), Batch(trajs[450:], horizon=h)


@pytest.fixture(scope="session")
def features(gridworld):
    return feature_table(gridworld.cfg)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
