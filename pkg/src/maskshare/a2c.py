"""n-step advantage actor-critic over per-agent bindings.

One update per parameter set per rollout: the rows of every agent bound to
the set (across all parallel environments and all n steps) form a single
batch, each row carrying its agent's mask. Losses::

    policy = -mean(log pi(a|o) * A) - entropy_coef * mean(H(pi(.|o)))
    value  = mean((V(o) - y)^2)

with A = y - V(o) held constant and y the n-step bootstrapped return that is
cut at episode ends. The critic gradient is scaled by ``value_coef``; actor and
critic gradients are each clipped to ``max_grad_norm`` before RMSProp.

Metrics CSV columns::

    step, wall_ms, strategy, seed, mean_return, per_type_return_0..T-1,
    policy_loss, value_loss, entropy
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .envs import EnvSpec, VecEnv, make_env
from .errors import NumericError
from .nn import GradientBuffer, MlpParameters, clip_by_global_norm, backward, forward, log_softmax, rmsprop_step
from .sharing import Bindings, Group

log = logging.getLogger(__name__)

EVAL_SALT = 0xE7A1


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    n_steps: int = 5
    lr: float = 7e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    n_envs: int = 8
    total_steps: int = 200_000
    eval_interval: int = 10_000
    seed: int = 0
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    max_grad_norm: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.n_steps < 1 or self.n_envs < 1:
            raise ValueError("n_steps and n_envs must be >= 1")
        if self.lr < 0 or self.entropy_coef < 0:
            raise ValueError("lr and entropy_coef must be non-negative")


def compute_nstep_targets(rewards: np.ndarray, dones: np.ndarray, bootstrap: np.ndarray, gamma: float) -> np.ndarray:
    """y_t = sum_j gamma^j r_{t+j} + gamma^(n-t) V(o_n), cut at the first done.

    ``rewards`` is (n, ...); ``dones`` broadcasts against it; ``bootstrap`` is
    the value of the observation after the last step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    keep = 1.0 - np.broadcast_to(np.asarray(dones, dtype=np.float64), rewards.shape)
    y = np.array(bootstrap, dtype=np.float64, copy=True) * np.ones(rewards.shape[1:])
    out = np.empty_like(rewards)
    for t in range(len(rewards) - 1, -1, -1):
        y = rewards[t] + gamma * keep[t] * y
        out[t] = y
    return out


def policy_loss(
    actor: MlpParameters,
    obs: np.ndarray,
    actions: np.ndarray,
    advantages: np.ndarray,
    mask=None,
    entropy_coef: float = 0.0,
) -> tuple[float, GradientBuffer, float]:
    """Returns (loss, gradients, mean entropy)."""
    probs, trace = forward(actor, obs, mask)
    if probs.ndim == 1:
        probs = probs[None, :]
    logp = log_softmax(trace.logits)
    n = len(actions)
    rows = np.arange(n)
    adv = np.asarray(advantages, dtype=np.float64)
    entropy = -(probs * logp).sum(axis=1)
    loss = -float(np.mean(logp[rows, actions] * adv)) - entropy_coef * float(entropy.mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite policy loss")
    g = probs * adv[:, None]
    g[rows, actions] -= adv
    if entropy_coef:
        g += entropy_coef * probs * (logp + entropy[:, None])
    g /= n
    return loss, backward(actor, trace, g, wrt="logits"), float(entropy.mean())


def value_loss(critic: MlpParameters, obs: np.ndarray, targets: np.ndarray, mask=None) -> tuple[float, GradientBuffer]:
    loss, grads, _ = _value_loss(critic, obs, targets, mask)
    return loss, grads


def _value_loss(critic, obs, targets, mask):
    values, trace = forward(critic, obs, mask)
    values = values.reshape(-1)
    diff = values - np.asarray(targets, dtype=np.float64).reshape(-1)
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NumericError("non-finite value loss")
    grad = (2.0 / len(diff)) * diff
    return loss, backward(critic, trace, grad.reshape(trace.pre[-1].shape)), values


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(probs))
    a = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    return np.minimum(a, probs.shape[1] - 1)


def act(b: Bindings, obs: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Actions for ``obs`` of shape (..., N, obs_dim); greedy when ``rng`` is None."""
    lead = obs.shape[:-2]
    actions = np.zeros(lead + (b.n_agents,), dtype=np.int64)
    for g in b.groups:
        x, masks = b.group_inputs(g, obs)
        probs, _ = forward(b.store.sets[g.set_id].actor, x, masks)
        a = probs.argmax(axis=1) if rng is None else sample_actions(probs, rng)
        actions[..., g.agents] = a.reshape(lead + (len(g.agents),))
    return actions


def values(b: Bindings, obs: np.ndarray) -> np.ndarray:
    lead = obs.shape[:-2]
    out = np.zeros(lead + (b.n_agents,))
    for g in b.groups:
        x, masks = b.group_inputs(g, obs)
        v, _ = forward(b.store.sets[g.set_id].critic, x, masks)
        out[..., g.agents] = v.reshape(lead + (len(g.agents),))
    return out


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float


def update_group(
    b: Bindings,
    g: Group,
    obs: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
    cfg: TrainerConfig,
) -> UpdateStats:
    """One RMSProp step on group ``g``'s parameter set from a rollout batch.

    ``obs`` is (n, E, N, D); ``actions`` and ``targets`` are (n, E, N).
    """
    pset = b.store.sets[g.set_id]
    x, masks = b.group_inputs(g, obs)
    a = actions[..., g.agents].reshape(-1)
    y = targets[..., g.agents].reshape(-1)
    v_loss, v_grads, v_now = _value_loss(pset.critic, x, y, masks)
    adv = y - v_now
    p_loss, p_grads, ent = policy_loss(pset.actor, x, a, adv, masks, cfg.entropy_coef)
    (p_grads,), p_norm = clip_by_global_norm([p_grads], cfg.max_grad_norm)
    (v_grads,), v_norm = clip_by_global_norm([v_grads.scale(cfg.value_coef)], cfg.max_grad_norm)
    norm = float(np.hypot(p_norm, v_norm))
    if cfg.lr > 0:
        rmsprop_step(pset.actor, p_grads, pset.actor_opt, cfg.lr, cfg.rms_decay, cfg.rms_eps)
        rmsprop_step(pset.critic, v_grads, pset.critic_opt, cfg.lr, cfg.rms_decay, cfg.rms_eps)
    return UpdateStats(p_loss, v_loss, ent, norm)


@dataclass
class MetricRow:
    step: int
    wall_ms: int
    strategy: str
    seed: int
    mean_return: float
    per_type_return: list[float]
    policy_loss: float
    value_loss: float
    entropy: float

    def as_list(self) -> list:
        return [
            self.step,
            self.wall_ms,
            self.strategy,
            self.seed,
            repr(self.mean_return),
            *(repr(v) for v in self.per_type_return),
            repr(self.policy_loss),
            repr(self.value_loss),
            repr(self.entropy),
        ]


def metrics_header(n_types: int) -> list[str]:
    return (
        ["step", "wall_ms", "strategy", "seed", "mean_return"]
        + [f"per_type_return_{k}" for k in range(n_types)]
        + ["policy_loss", "value_loss", "entropy"]
    )


class MetricsWriter:
    """Append-only metrics CSV."""

    def __init__(self, path: Union[str, Path], n_types: int) -> None:
        self.path = Path(path)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(metrics_header(n_types))

    def __call__(self, row: MetricRow) -> None:
        self._w.writerow(row.as_list())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class TrainResult:
    bindings: Bindings
    metrics: list[MetricRow]
    update_counts: dict[int, int]
    env_steps: int
    initial: dict[int, tuple[MlpParameters, MlpParameters]] = field(repr=False)


def train(
    cfg: TrainerConfig,
    spec: EnvSpec,
    b: Bindings,
    on_metrics: Optional[Callable[[MetricRow], None]] = None,
    strategy_name: Optional[str] = None,
) -> TrainResult:
    """Run A2C until ``cfg.total_steps`` environment transitions have been collected.

    One environment transition advances every agent of one environment copy.
    """
    venv = VecEnv(spec, cfg.n_envs, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0xAC7])
    types = spec.agent_types
    name = strategy_name or b.strategy.kind
    initial = b.store.snapshot()
    counts = {sid: 0 for sid in b.store.sets}
    metrics: list[MetricRow] = []

    n, e, N = cfg.n_steps, cfg.n_envs, spec.n_agents
    obs = venv.reset()
    buf_obs = np.empty((n, e, N, venv.obs_dim))
    buf_act = np.empty((n, e, N), dtype=np.int64)
    buf_rew = np.empty((n, e, N))
    buf_done = np.empty((n, e))

    window_returns: list[np.ndarray] = []
    window_stats: list[UpdateStats] = []
    last_returns = np.full(N, np.nan)
    steps = 0
    next_eval = cfg.eval_interval
    t0 = time.perf_counter()

    def emit() -> None:
        nonlocal last_returns
        if window_returns:
            last_returns = np.mean(window_returns, axis=0)
        per_type = [float(last_returns[types == k].mean()) for k in range(spec.n_types)]
        stats = window_stats or [UpdateStats(np.nan, np.nan, np.nan, np.nan)]
        row = MetricRow(
            steps,
            int((time.perf_counter() - t0) * 1000),
            name,
            cfg.seed,
            float(last_returns.mean()),
            per_type,
            float(np.mean([s.policy_loss for s in stats])),
            float(np.mean([s.value_loss for s in stats])),
            float(np.mean([s.entropy for s in stats])),
        )
        metrics.append(row)
        if on_metrics is not None:
            on_metrics(row)
        window_returns.clear()
        window_stats.clear()

    while steps < cfg.total_steps:
        for t in range(n):
            actions = act(b, obs, rng)
            buf_obs[t] = obs
            buf_act[t] = actions
            obs, rewards, dones, infos = venv.step(actions)
            buf_rew[t] = rewards
            buf_done[t] = dones
            for info in infos:
                if "episode_return" in info:
                    window_returns.append(info["episode_return"])
            steps += e
        # bootstrap from the post-rollout observation; cut where the episode ended
        targets = compute_nstep_targets(buf_rew, buf_done[:, :, None], values(b, obs), cfg.gamma)
        for g in b.groups:
            stats = update_group(b, g, buf_obs, buf_act, targets, cfg)
            if not np.isfinite(stats.grad_norm):
                raise NumericError(f"divergence at step {steps} in parameter set {g.set_id}")
            counts[g.set_id] += 1
            window_stats.append(stats)
        if steps >= next_eval:
            emit()
            next_eval += cfg.eval_interval
    if not metrics or metrics[-1].step != steps:
        emit()
    return TrainResult(b, metrics, counts, steps, initial)


@dataclass
class EvalResult:
    per_agent: np.ndarray  # mean undiscounted return per agent
    per_type: list[float]
    mean: float
    episodes: int


def evaluate(b: Bindings, spec: EnvSpec, episodes: int = 10, seed: int = 0, greedy: bool = True) -> EvalResult:
    """Undiscounted returns over ``episodes`` test episodes on evaluation-only seeds."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = make_env(spec)
    rng = None if greedy else np.random.default_rng([EVAL_SALT, seed, 1])
    totals = np.zeros(spec.n_agents)
    for ep in range(episodes):
        obs = env.reset(seed=[EVAL_SALT, seed, ep])
        while True:
            res = env.step(act(b, obs, rng))
            totals += res.rewards
            obs = res.observations
            if res.done:
                break
    per_agent = totals / episodes
    types = spec.agent_types
    per_type = [float(per_agent[types == k].mean()) for k in range(spec.n_types)]
    return EvalResult(per_agent, per_type, float(per_agent.mean()), episodes)
