"""Blind-Particle Spread.

Agents and landmarks live in the unit square. Each type has one landmark and
an agent is rewarded ``-||pos - landmark[type]||`` after every move, but no
agent ever observes a type label, its own included.

Observation of agent i (length ``2*T + 2*(N-1)``)::

    [landmark_0 - pos_i, ..., landmark_{T-1} - pos_i,      # fixed type order
     pos_j - pos_i for j != i in increasing j]              # fixed agent order

Actions: 0 stay, 1 up (+y), 2 down (-y), 3 left (-x), 4 right (+x); each move
is ``step_size`` and positions are clamped to [0, 1]^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import MultiAgentEnv

MOVES = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0]])


@dataclass
class BpsState:
    agent_pos: np.ndarray  # (N, 2)
    landmarks: np.ndarray  # (T, 2)
    agent_types: np.ndarray  # (N,), hidden from observations


class BlindParticleSpread(MultiAgentEnv):
    n_actions = 5
    action_names = ("stay", "up", "down", "left", "right")

    def __init__(self, spec, seed=None):
        super().__init__(spec, seed)
        n = self.n_agents
        self._others = ~np.eye(n, dtype=bool)
        self.state: BpsState | None = None

    @property
    def obs_dim(self) -> int:
        return 2 * self.spec.n_types + 2 * (self.n_agents - 1)

    def _reset(self) -> None:
        landmarks = self.rng.uniform(0.0, 1.0, size=(self.spec.n_types, 2))
        pos = self.rng.uniform(0.0, 1.0, size=(self.n_agents, 2))
        self.state = BpsState(pos, landmarks, self.agent_types.copy())

    def observe(self) -> np.ndarray:
        s = self.state
        n = self.n_agents
        to_landmarks = (s.landmarks[None, :, :] - s.agent_pos[:, None, :]).reshape(n, -1)
        rel = s.agent_pos[None, :, :] - s.agent_pos[:, None, :]
        to_others = rel[self._others].reshape(n, -1)
        return np.concatenate([to_landmarks, to_others], axis=1)

    def distances(self) -> np.ndarray:
        s = self.state
        return np.linalg.norm(s.agent_pos - s.landmarks[s.agent_types], axis=1)

    def _step(self, actions):
        s = self.state
        s.agent_pos = np.clip(s.agent_pos + self.spec.step_size * MOVES[actions], 0.0, 1.0)
        return -self.distances(), {}

    def oracle_actions(self) -> np.ndarray:
        """Greedy scripted policy: close the larger axis gap toward the own landmark."""
        s = self.state
        gap = s.landmarks[s.agent_types] - s.agent_pos
        half = self.spec.step_size / 2
        actions = np.zeros(self.n_agents, dtype=np.int64)
        for i, (dx, dy) in enumerate(gap):
            if max(abs(dx), abs(dy)) <= half:
                actions[i] = 0
            elif abs(dx) >= abs(dy):
                actions[i] = 4 if dx > 0 else 3
            else:
                actions[i] = 1 if dy > 0 else 2
        return actions
