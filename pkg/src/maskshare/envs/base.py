"""Environment spec, step result and the interface shared by BPS and LBF."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from ..errors import ContractError

DEFAULT_HORIZON = {"bps": 25, "lbf": 50}
ENV_CLASSES: dict[str, type] = {}


def register_env(name: str, cls: type, default_horizon: int) -> None:
    """Make ``EnvSpec(name, ...)`` constructible and ``make_env`` dispatch to ``cls``."""
    DEFAULT_HORIZON[name] = default_horizon
    ENV_CLASSES[name] = cls


@dataclass(frozen=True)
class EnvSpec:
    name: str
    agents_per_type: tuple[int, ...]
    horizon: Optional[int] = None
    seed: int = 0
    # LBF grid side; ignored by BPS (unit arena)
    size: int = 8
    n_food: int = 3
    max_food_level: int = 3
    step_size: float = 0.05

    def __post_init__(self) -> None:
        if self.name not in DEFAULT_HORIZON:
            raise ValueError(f"unknown environment {self.name!r}; expected one of {sorted(DEFAULT_HORIZON)}")
        object.__setattr__(self, "agents_per_type", tuple(int(a) for a in self.agents_per_type))
        if not self.agents_per_type or any(a < 1 for a in self.agents_per_type):
            raise ValueError("agents_per_type must be a nonempty list of positive integers")
        if self.n_agents < 2:
            raise ValueError("need at least two agents")
        if self.horizon is None:
            object.__setattr__(self, "horizon", DEFAULT_HORIZON[self.name])
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def n_agents(self) -> int:
        return sum(self.agents_per_type)

    @property
    def n_types(self) -> int:
        return len(self.agents_per_type)

    @property
    def agent_types(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_types), self.agents_per_type)


@dataclass
class StepResult:
    observations: np.ndarray  # (N, obs_dim)
    rewards: np.ndarray  # (N,)
    done: bool
    info: dict[str, Any] = field(default_factory=dict)


class MultiAgentEnv:
    """Seeded simulator; ``reset`` then ``step`` until ``done``."""

    n_actions: int
    action_names: tuple[str, ...]

    def __init__(self, spec: EnvSpec, seed: Optional[Sequence[int] | int] = None) -> None:
        self.spec = spec
        self.n_agents = spec.n_agents
        self.agent_types = spec.agent_types
        self._seed = spec.seed if seed is None else seed
        self.rng = np.random.default_rng(self._seed)
        self.t = 0

    @property
    def obs_dim(self) -> int:
        raise NotImplementedError

    def reset(self, seed: Optional[Sequence[int] | int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self._reset()
        return self.observe()

    def step(self, actions: Sequence[int]) -> StepResult:
        actions = np.asarray(actions)
        if actions.shape != (self.n_agents,):
            raise ContractError(f"expected {self.n_agents} actions, got shape {actions.shape}")
        for i, a in enumerate(actions):
            if not (0 <= a < self.n_actions) or int(a) != a:
                raise ContractError(f"agent {i}: action {a!r} outside 0..{self.n_actions - 1}")
        if self.t >= self.spec.horizon:
            raise ContractError("episode is over; call reset()")
        rewards, info = self._step(actions.astype(np.int64))
        self.t += 1
        done = self.t >= self.spec.horizon or self._terminal()
        return StepResult(self.observe(), rewards, done, info)

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def _reset(self) -> None:
        raise NotImplementedError

    def _step(self, actions: np.ndarray) -> tuple[np.ndarray, dict]:
        raise NotImplementedError

    def _terminal(self) -> bool:
        return False
