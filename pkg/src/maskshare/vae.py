"""Identity VAE: one latent code per agent learned from its transitions.

The encoder sees nothing but the one-hot agent index and outputs the mean and
log-variance of a diagonal Gaussian over the identity code z. The decoder gets
``(z, o_t, one-hot a_t)`` and predicts ``(o_{t+1}, r_t)``. Per batch::

    recon = mean over rows and dims of (o_hat - o_next)^2 + mean over rows of (r_hat - r)^2
    kl    = mean over rows of 0.5 * sum_d(mu^2 + var - log var - 1)
    loss  = recon + kl_weight * kl

Because q(z | i) depends on the agent alone, one code explains all of an
agent's transitions; the dataset-level bound then charges the KL once per
agent rather than once per transition, which is what ``train_vae``'s default
``kl_weight = N / len(dataset)`` does.

Identity file layout (text)::

    # agent z_0 ... z_{m-1}
    <agent index> <float> ... <float>
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .a2c import act
from .envs import EnvSpec, VecEnv, action_dim, obs_dim
from .errors import NumericError
from .nn import GradientBuffer, MlpParameters, RmsPropState, backward, forward, init_mlp, rmsprop_step
from .sharing import SharingStrategy, build_bindings

log = logging.getLogger(__name__)

DEFAULT_LATENT = 2
DEFAULT_SAMPLES = 50_000


@dataclass(frozen=True)
class TransitionSample:
    agent: int
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray


@dataclass
class TransitionDataset:
    agent: np.ndarray  # (M,)
    obs: np.ndarray  # (M, D)
    action: np.ndarray  # (M,)
    reward: np.ndarray  # (M,)
    next_obs: np.ndarray  # (M, D)
    n_agents: int
    n_actions: int

    def __len__(self) -> int:
        return len(self.agent)

    def __iter__(self) -> Iterator[TransitionSample]:
        for k in range(len(self)):
            yield TransitionSample(
                int(self.agent[k]), self.obs[k], int(self.action[k]), float(self.reward[k]), self.next_obs[k]
            )

    def subset(self, idx: np.ndarray) -> "TransitionDataset":
        return TransitionDataset(
            self.agent[idx], self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx],
            self.n_agents, self.n_actions,
        )

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]


def collect_pretraining_data(
    spec: EnvSpec, steps: int = DEFAULT_SAMPLES, seed: int = 0, n_envs: int = 8
) -> TransitionDataset:
    """``steps`` transitions gathered by a freshly initialized FuPS policy, sampled stochastically.

    Every environment step yields one transition per agent, so per-agent counts
    differ by at most one.
    """
    n, d, a_dim = spec.n_agents, obs_dim(spec), action_dim(spec)
    if steps <= 0:
        return TransitionDataset(
            np.zeros(0, np.int64), np.zeros((0, d)), np.zeros(0, np.int64), np.zeros(0), np.zeros((0, d)), n, a_dim
        )
    policy = build_bindings(SharingStrategy("FuPS"), n, d, a_dim, seed=seed)
    venv = VecEnv(spec, n_envs, seed=seed + 0x1D)
    rng = np.random.default_rng([seed, 0xDA7A])
    rounds = -(-steps // (n * n_envs))
    agents, obs_l, act_l, rew_l, next_l = [], [], [], [], []
    obs = venv.reset()
    for _ in range(rounds):
        actions = act(policy, obs, rng)
        nxt, rewards, dones, infos = venv.step(actions)
        final = nxt.copy()
        for k, info in enumerate(infos):
            if "final_obs" in info:
                final[k] = info["final_obs"]
        agents.append(np.tile(np.arange(n), n_envs))
        obs_l.append(obs.reshape(-1, d))
        act_l.append(actions.reshape(-1))
        rew_l.append(rewards.reshape(-1))
        next_l.append(final.reshape(-1, d))
        obs = nxt
    cat = np.concatenate
    return TransitionDataset(
        cat(agents)[:steps], cat(obs_l)[:steps], cat(act_l)[:steps], cat(rew_l)[:steps], cat(next_l)[:steps], n, a_dim
    )


def make_encoder(n_agents: int, latent: int = DEFAULT_LATENT, seed: int = 0, hidden=(64, 64)) -> MlpParameters:
    return init_mlp([n_agents, *hidden, 2 * latent], np.random.default_rng([seed, 0xE]), "tanh", "linear")


def make_decoder(obs_size: int, n_actions: int, latent: int = DEFAULT_LATENT, seed: int = 0, hidden=(64, 64)) -> MlpParameters:
    return init_mlp(
        [latent + obs_size + n_actions, *hidden, obs_size + 1], np.random.default_rng([seed, 0xD]), "relu", "linear"
    )


def encode(enc: MlpParameters, agents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(mu, log_var) for each agent index; the input is the one-hot index alone."""
    n = enc.layer_sizes[0]
    out, _ = forward(enc, np.eye(n)[np.asarray(agents)])
    m = out.shape[-1] // 2
    return out[..., :m], out[..., m:]


def gaussian_kl(mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag exp(log_var)) || N(0, I)) per row."""
    return 0.5 * np.sum(mu**2 + np.exp(log_var) - log_var - 1.0, axis=-1)


@dataclass
class ElboParts:
    loss: float
    reconstruction: float
    kl: float


def elbo_loss(
    enc: MlpParameters,
    dec: MlpParameters,
    batch: TransitionDataset,
    eps: np.ndarray,
    kl_weight: float = 1.0,
) -> tuple[ElboParts, GradientBuffer, GradientBuffer]:
    """Negative ELBO with reparameterized z = mu + sigma * eps; exact gradients for the given eps."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    b = len(batch)
    x_enc = np.eye(batch.n_agents)[batch.agent]
    out, tr_enc = forward(enc, x_enc)
    m = out.shape[1] // 2
    mu, log_var = out[:, :m], out[:, m:]
    std = np.exp(0.5 * log_var)
    z = mu + std * eps

    x_dec = np.concatenate([z, batch.obs, np.eye(batch.n_actions)[batch.action]], axis=1)
    pred, tr_dec = forward(dec, x_dec)
    d = batch.obs_dim
    err_obs = pred[:, :d] - batch.next_obs
    err_rew = pred[:, d] - batch.reward
    recon = float(np.mean(err_obs**2) + np.mean(err_rew**2))
    kl = float(np.mean(gaussian_kl(mu, log_var)))
    loss = recon + kl_weight * kl
    if not np.isfinite(loss):
        raise NumericError("non-finite ELBO loss")

    g_pred = np.empty_like(pred)
    g_pred[:, :d] = 2.0 * err_obs / (b * d)
    g_pred[:, d] = 2.0 * err_rew / b
    dec_grads, g_in = backward(dec, tr_dec, g_pred, input_grad=True)
    g_z = g_in[:, :m]
    g_mu = g_z + kl_weight * mu / b
    g_log_var = g_z * eps * 0.5 * std + kl_weight * 0.5 * (np.exp(log_var) - 1.0) / b
    enc_grads = backward(enc, tr_enc, np.concatenate([g_mu, g_log_var], axis=1))
    return ElboParts(loss, recon, kl), enc_grads, dec_grads


def train_vae(
    enc: MlpParameters,
    dec: MlpParameters,
    dataset: TransitionDataset,
    epochs: int = 30,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 256,
    kl_weight: Optional[float] = None,
) -> tuple[MlpParameters, MlpParameters, list[float]]:
    """RMSProp on the negative ELBO; returns the (updated in place) nets and per-epoch mean loss."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if kl_weight is None:
        kl_weight = dataset.n_agents / len(dataset)
    rng = np.random.default_rng([seed, 0x7AE])
    enc_opt, dec_opt = RmsPropState.zeros_like(enc), RmsPropState.zeros_like(dec)
    m = enc.layer_sizes[-1] // 2
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses, sizes = [], []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            eps = rng.standard_normal((len(idx), m))
            try:
                parts, g_enc, g_dec = elbo_loss(enc, dec, dataset.subset(idx), eps, kl_weight)
                rmsprop_step(enc, g_enc, enc_opt, lr)
                rmsprop_step(dec, g_dec, dec_opt, lr)
            except NumericError as exc:
                raise NumericError(f"VAE diverged in epoch {epoch}: {exc}") from exc
            losses.append(parts.loss)
            sizes.append(len(idx))
        history.append(float(np.average(losses, weights=sizes)))
        log.debug("vae epoch %d loss %.5f", epoch, history[-1])
    return enc, dec, history


@dataclass(frozen=True)
class IdentityVector:
    agent: int
    z: np.ndarray


def identity_vector(enc: MlpParameters, agent: int, mode: str = "mean", seed: Optional[int] = None) -> IdentityVector:
    """Posterior mean (``mode="mean"``) or a seeded sample (``mode="sample"``)."""
    n = enc.layer_sizes[0]
    if not 0 <= agent < n:
        raise IndexError(f"agent {agent} outside 0..{n - 1}")
    mu, log_var = encode(enc, np.array([agent]))
    mu, log_var = mu[0], log_var[0]
    if mode == "mean":
        return IdentityVector(agent, mu.copy())
    if mode == "sample":
        eps = np.random.default_rng([0 if seed is None else seed, agent]).standard_normal(mu.shape)
        return IdentityVector(agent, mu + np.exp(0.5 * log_var) * eps)
    raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")


def identity_vectors(enc: MlpParameters, mode: str = "mean", seed: Optional[int] = None) -> list[IdentityVector]:
    return [identity_vector(enc, i, mode, seed) for i in range(enc.layer_sizes[0])]


def dump_identities(vectors: list[IdentityVector], path: Union[str, Path]) -> None:
    m = len(vectors[0].z) if vectors else 0
    lines = ["# agent " + " ".join(f"z_{d}" for d in range(m))]
    lines += [f"{v.agent} " + " ".join(repr(float(x)) for x in v.z) for v in vectors]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_identities(path: Union[str, Path]) -> list[IdentityVector]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        out.append(IdentityVector(int(parts[0]), np.array([float(x) for x in parts[1:]])))
    return out
