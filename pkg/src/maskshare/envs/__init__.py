"""Multi-agent simulators behind one interface, plus a vectorized wrapper."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

import numpy as np

from .base import ENV_CLASSES, EnvSpec, MultiAgentEnv, StepResult, register_env
from .bps import BlindParticleSpread, BpsState
from .lbf import LevelBasedForaging, LbfState

__all__ = [
    "EnvSpec",
    "StepResult",
    "MultiAgentEnv",
    "BlindParticleSpread",
    "BpsState",
    "LevelBasedForaging",
    "LbfState",
    "make_env",
    "register_env",
    "obs_dim",
    "action_dim",
    "VecEnv",
    "TrajectoryWriter",
]

ENV_CLASSES.update(bps=BlindParticleSpread, lbf=LevelBasedForaging)


def make_env(spec: EnvSpec, seed=None) -> MultiAgentEnv:
    return ENV_CLASSES[spec.name](spec, seed)


def obs_dim(spec: EnvSpec, agent: int = 0) -> int:
    # layouts are uniform across agents
    if not 0 <= agent < spec.n_agents:
        raise IndexError(f"agent {agent} out of range")
    if spec.name == "bps":
        return 2 * spec.n_types + 2 * (spec.n_agents - 1)
    if spec.name == "lbf":
        return 3 + 4 * spec.n_food + 2 * (spec.n_agents - 1)
    return make_env(spec).obs_dim


def action_dim(spec: EnvSpec, agent: int = 0) -> int:
    if not 0 <= agent < spec.n_agents:
        raise IndexError(f"agent {agent} out of range")
    return ENV_CLASSES[spec.name].n_actions


class VecEnv:
    """Several independently seeded copies stepped in lockstep with auto-reset.

    Copy ``k`` draws from ``default_rng([seed, k])``. When an episode ends, the
    returned observation already belongs to the next episode; the terminal
    observation and per-agent undiscounted returns are reported in ``infos``.
    """

    def __init__(self, spec: EnvSpec, n_envs: int, seed: Optional[int] = None) -> None:
        base = spec.seed if seed is None else seed
        self.spec = spec
        self.envs = [make_env(spec, seed=[base, k]) for k in range(n_envs)]
        self.n_envs = n_envs
        self.n_agents = spec.n_agents
        self.obs_dim = self.envs[0].obs_dim
        self.n_actions = self.envs[0].n_actions
        self._returns = np.zeros((n_envs, spec.n_agents))

    def reset(self) -> np.ndarray:
        self._returns[:] = 0.0
        return np.stack([e.reset() for e in self.envs])

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[dict]]:
        obs = np.empty((self.n_envs, self.n_agents, self.obs_dim))
        rewards = np.empty((self.n_envs, self.n_agents))
        dones = np.zeros(self.n_envs, dtype=bool)
        infos = []
        for k, env in enumerate(self.envs):
            res = env.step(actions[k])
            rewards[k] = res.rewards
            self._returns[k] += res.rewards
            info = dict(res.info)
            if res.done:
                info["final_obs"] = res.observations
                info["episode_return"] = self._returns[k].copy()
                self._returns[k] = 0.0
                obs[k] = env.reset()
            else:
                obs[k] = res.observations
            dones[k] = res.done
            infos.append(info)
        return obs, rewards, dones, infos


class TrajectoryWriter:
    """Tab-separated debug dump: ``t  agent  obs(comma-joined)  action  reward``."""

    def __init__(self, path: Union[str, Path]) -> None:
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write("# t\tagent\tobs\taction\treward\n")

    def write(self, t: int, agent: int, obs: np.ndarray, action: int, reward: float) -> None:
        obs_txt = ",".join(repr(float(v)) for v in obs)
        self._fh.write(f"{t}\t{agent}\t{obs_txt}\t{int(action)}\t{float(reward)!r}\n")

    def write_step(self, t: int, obs: np.ndarray, actions: np.ndarray, rewards: np.ndarray) -> None:
        for i in range(len(actions)):
            self.write(t, i, obs[i], actions[i], rewards[i])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trajectory(path: Union[str, Path]) -> list[tuple[int, int, np.ndarray, int, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        t, agent, obs, action, reward = line.split("\t")
        rows.append((int(t), int(agent), np.array([float(v) for v in obs.split(",")]), int(action), float(reward)))
    return rows
