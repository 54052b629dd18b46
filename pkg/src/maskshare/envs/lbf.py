"""Level-Based Foraging on a square grid.

Agent levels come from the agent's type (type t has level t + 1); food levels
are drawn uniformly from 1..max_food_level at reset, capped at the team's total
level so every food is collectable. Agents, foods never share a cell.

A food is collected when the agents that are 4-adjacent to it and issue
``load`` have a level sum >= the food level. Each loader gets::

    level_i * food_level / (sum_of_loader_levels * total_food_level_this_episode)

so clearing every food hands out a total of 1 across the team.

Observation of agent i (length ``3 + 4*F + 2*(N-1)``), coordinates divided by
``size - 1`` and levels by ``max_food_level``; food and other agents are given
as offsets from agent i::

    [own_row, own_col, own_level,
     (d_row, d_col, level, present) per food    # zeros once collected
     (d_row, d_col) per other agent in increasing index]   # no levels

Actions: 0 noop, 1 up (row-1), 2 down (row+1), 3 left (col-1), 4 right (col+1), 5 load.
A move succeeds only into an in-bounds cell that is empty at the start of the
step and that no other agent also targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import MultiAgentEnv

LOAD = 5
MOVES = np.array([[0, 0], [-1, 0], [1, 0], [0, -1], [0, 1], [0, 0]])


@dataclass
class LbfState:
    size: int
    agent_pos: np.ndarray  # (N, 2) int
    agent_levels: np.ndarray  # (N,)
    food_pos: np.ndarray  # (F, 2) int
    food_levels: np.ndarray  # (F,)
    food_present: np.ndarray  # (F,) bool

    @property
    def remaining_food(self) -> int:
        return int(self.food_present.sum())


class LevelBasedForaging(MultiAgentEnv):
    n_actions = 6
    action_names = ("noop", "up", "down", "left", "right", "load")

    def __init__(self, spec, seed=None):
        super().__init__(spec, seed)
        if spec.n_food + self.n_agents > spec.size * spec.size:
            raise ValueError("grid too small for agents and food")
        self.agent_levels = self.agent_types + 1
        self.state: LbfState | None = None
        self._total_food_level = 1

    @property
    def obs_dim(self) -> int:
        return 3 + 4 * self.spec.n_food + 2 * (self.n_agents - 1)

    def _reset(self) -> None:
        g, f, n = self.spec.size, self.spec.n_food, self.n_agents
        cells = self.rng.choice(g * g, size=f + n, replace=False)
        rc = np.stack([cells // g, cells % g], axis=1)
        cap = min(self.spec.max_food_level, int(self.agent_levels.sum()))
        levels = self.rng.integers(1, cap + 1, size=f)
        self.state = LbfState(g, rc[f:].copy(), self.agent_levels.copy(), rc[:f].copy(), levels, np.ones(f, dtype=bool))
        self._total_food_level = int(levels.sum())

    def observe(self) -> np.ndarray:
        s = self.state
        n = self.n_agents
        scale = max(s.size - 1, 1)
        lvl = float(self.spec.max_food_level)
        pos = s.agent_pos / scale
        own = np.concatenate([pos, (s.agent_levels / lvl)[:, None]], axis=1)
        present = s.food_present.astype(np.float64)
        f = len(present)
        food_off = (s.food_pos[None] / scale - pos[:, None]) * present[None, :, None]  # (N, F, 2)
        food_rest = np.broadcast_to(np.stack([s.food_levels / lvl * present, present], axis=1), (n, f, 2))
        food = np.concatenate([food_off, food_rest], axis=2).reshape(n, -1)
        offsets = pos[None] - pos[:, None]  # offsets[i, j] = pos_j - pos_i
        others = offsets[~np.eye(n, dtype=bool)].reshape(n, -1)
        return np.concatenate([own, food, others], axis=1)

    def _step(self, actions):
        s = self.state
        rewards = np.zeros(self.n_agents)
        loading = actions == LOAD
        collected = 0
        for f in np.flatnonzero(s.food_present):
            adjacent = np.abs(s.agent_pos - s.food_pos[f]).sum(axis=1) == 1
            loaders = np.flatnonzero(adjacent & loading)
            if loaders.size == 0:
                continue
            level_sum = s.agent_levels[loaders].sum()
            if level_sum >= s.food_levels[f]:
                rewards[loaders] += (
                    s.agent_levels[loaders] * s.food_levels[f] / (level_sum * self._total_food_level)
                )
                s.food_present[f] = False
                collected += 1

        occupied = {tuple(p) for p in s.agent_pos}
        occupied |= {tuple(p) for p in s.food_pos[s.food_present]}
        targets = s.agent_pos + MOVES[actions]
        wants = {}
        for i, a in enumerate(actions):
            if a in (0, LOAD):
                continue
            r, c = targets[i]
            if 0 <= r < s.size and 0 <= c < s.size and (r, c) not in occupied:
                wants.setdefault((r, c), []).append(i)
        for cell, movers in wants.items():
            if len(movers) == 1:
                s.agent_pos[movers[0]] = cell
        return rewards, {"food_collected": collected, "remaining_food": s.remaining_food}

    def _terminal(self) -> bool:
        return not self.state.food_present.any()
