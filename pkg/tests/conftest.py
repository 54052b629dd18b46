import numpy as np
import pytest

from maskshare.envs import MultiAgentEnv, register_env


class TwoArmBandit(MultiAgentEnv):
    """One-step episodes; every agent independently earns 1 for action 0, else 0."""

    n_actions = 3
    action_names = ("good", "bad", "worse")

    @property
    def obs_dim(self) -> int:
        return 1

    def _reset(self) -> None:
        pass

    def observe(self) -> np.ndarray:
        return np.ones((self.n_agents, 1))

    def _step(self, actions):
        return (actions == 0).astype(np.float64), {}


register_env("bandit", TwoArmBandit, 1)


@pytest.fixture
def bandit_env():
    return TwoArmBandit
