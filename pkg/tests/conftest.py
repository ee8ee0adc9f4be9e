import itertools

import numpy as np
import pytest

from brql.mdp import MdpModel


def random_mdp(rng, S=3, A=2, gamma=0.9, reward_scale=1.0):
    reward = rng.uniform(0, reward_scale, (S, A, S))
    trans = rng.dirichlet(np.ones(S), (S, A))
    return MdpModel(reward, trans, gamma, name="random")


def all_policies(model):
    choices = [np.flatnonzero(model.admissible[s]) for s in range(model.num_states)]
    return [np.array(p) for p in itertools.product(*choices)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_mdp(rng):
    return random_mdp(rng)


# acceptance criteria append "PASS/FAIL ..." lines here; printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
