import numpy as np
import pytest

from smcplan import TabularMdp


def make_random_mdp(n_states, n_actions, seed, terminal_states=(), discount=1.0):
    """Random dense MDP with Dirichlet transition rows and rewards in [-1, 1].

    State 0 is always non-terminal; terminal states get the absorbing
    zero-reward structure.
    """
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    terminal = np.zeros(n_states, dtype=bool)
    for s in terminal_states:
        if s == 0:
            raise ValueError("state 0 stays non-terminal in test MDPs")
        terminal[s] = True
        transition[s] = 0.0
        transition[s, :, s] = 1.0
        reward[s] = 0.0
    return TabularMdp(transition, reward, terminal, discount)


def make_random_policy(n_states, n_actions, seed):
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.ones(n_actions), size=n_states)


@pytest.fixture
def tmp_out(tmp_path):
    return tmp_path / "out"
