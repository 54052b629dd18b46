"""Per-agent actor/critic bindings for the six parameter-sharing strategies.

===========  ===================  =========================================
strategy     parameter sets       per-agent difference
===========  ===================  =========================================
NoPS         N                    own networks
FuPS         1                    none
FuPSId       1 (input + N)        one-hot agent id appended to the input
SePS         K                    network of the agent's identity cluster
SNPPS        1                    random Bernoulli neuron mask per agent
AdaPS        1                    mask of the agent's identity cluster
===========  ===================  =========================================

Actor and critic are separate networks; a masked agent uses the same mask for
both.

Binding manifest layout (text)::

    # maskshare binding manifest
    strategy=<name>
    agent actor critic mask augment
    <i> <actor set> <critic set> <mask id or -> <none|onehot>
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .cluster import DEFAULT_LAMBDA, ClusterModel, MaskRegistry
from .errors import ContractError
from .nn import MlpParameters, NeuronMask, RmsPropState, forward, init_mlp, param_count

STRATEGIES = ("NoPS", "FuPS", "FuPSId", "SePS", "SNPPS", "AdaPS")
_ALIASES = {
    "nops": "NoPS",
    "fups": "FuPS",
    "fupsid": "FuPSId",
    "fups+id": "FuPSId",
    "seps": "SePS",
    "snpps": "SNPPS",
    "snp-ps": "SNPPS",
    "adaps": "AdaPS",
}
DEFAULT_HIDDEN = (64, 64)


@dataclass(frozen=True)
class SharingStrategy:
    kind: str
    k: Optional[int] = None
    lam: float = DEFAULT_LAMBDA
    drop_rate: Optional[float] = None
    seed: int = 0

    def __post_init__(self) -> None:
        kind = _ALIASES.get(self.kind.lower(), self.kind)
        if kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {', '.join(STRATEGIES)}")
        object.__setattr__(self, "kind", kind)
        if self.drop_rate is not None and not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")
        if self.k is not None and self.k < 1:
            raise ValueError("K must be positive")

    @classmethod
    def parse(cls, name: str, **kw) -> "SharingStrategy":
        return cls(name.strip(), **kw)

    @property
    def needs_identity(self) -> bool:
        return self.kind in ("SePS", "AdaPS")

    def __str__(self) -> str:
        return self.kind


@dataclass(frozen=True)
class PolicyHandle:
    agent: int
    actor_id: int
    critic_id: int
    mask_id: Optional[int] = None
    augment: str = "none"  # or "onehot"


@dataclass
class ParamSet:
    actor: MlpParameters
    critic: MlpParameters
    actor_opt: RmsPropState = field(init=False)
    critic_opt: RmsPropState = field(init=False)

    def __post_init__(self) -> None:
        self.actor_opt = RmsPropState.zeros_like(self.actor)
        self.critic_opt = RmsPropState.zeros_like(self.critic)


@dataclass
class ParameterStore:
    sets: dict[int, ParamSet]

    def __len__(self) -> int:
        return len(self.sets)

    def snapshot(self) -> dict[int, tuple[MlpParameters, MlpParameters]]:
        return {i: (s.actor.copy(), s.critic.copy()) for i, s in self.sets.items()}


@dataclass
class Group:
    """Agents bound to one parameter set, with their stacked masks and id features."""

    set_id: int
    agents: np.ndarray
    masks: Optional[list[np.ndarray]]  # per hidden layer, (len(agents), h)
    onehots: Optional[np.ndarray]  # (len(agents), N)


@dataclass
class Bindings:
    strategy: SharingStrategy
    store: ParameterStore
    handles: list[PolicyHandle]
    masks: dict[int, NeuronMask]
    n_agents: int
    groups: list[Group] = field(init=False)

    def __post_init__(self) -> None:
        for h in self.handles:
            if h.actor_id not in self.store.sets or h.critic_id not in self.store.sets:
                raise ContractError(f"agent {h.agent} bound to a missing parameter set")
            if h.mask_id is not None and h.mask_id not in self.masks:
                raise ContractError(f"agent {h.agent} bound to missing mask {h.mask_id}")
            if h.actor_id != h.critic_id:
                raise ContractError("actor and critic must come from the same parameter set")
        self.groups = []
        eye = np.eye(self.n_agents)
        for sid in sorted(self.store.sets):
            agents = np.array([h.agent for h in self.handles if h.actor_id == sid], dtype=np.int64)
            if agents.size == 0:
                continue
            hs = [self.handles[a] for a in agents]
            hidden = self.store.sets[sid].actor.hidden_sizes
            masks = None
            if any(h.mask_id is not None for h in hs):
                per_agent = [self.masks[h.mask_id] if h.mask_id is not None else NeuronMask.ones(hidden) for h in hs]
                masks = [np.stack([m.layers[l] for m in per_agent]) for l in range(len(hidden))]
            onehots = eye[agents] if any(h.augment == "onehot" for h in hs) else None
            self.groups.append(Group(sid, agents, masks, onehots))

    def group_inputs(self, group: Group, obs: np.ndarray) -> tuple[np.ndarray, Optional[list[np.ndarray]]]:
        """Rows for ``obs[..., group.agents, :]`` flattened, with matching mask rows.

        ``obs`` has shape (..., N, obs_dim); leading axes are tiled over.
        """
        sub = obs[..., group.agents, :]
        lead = sub.shape[:-2]
        reps = int(np.prod(lead)) if lead else 1
        x = sub.reshape(-1, sub.shape[-1])
        if group.onehots is not None:
            x = np.concatenate([x, np.tile(group.onehots, (reps, 1))], axis=1)
        masks = None if group.masks is None else [np.tile(m, (reps, 1)) for m in group.masks]
        return x, masks


def _architecture(obs_dim: int, n_actions: int, hidden: Sequence[int], in_extra: int):
    actor = [obs_dim + in_extra, *hidden, n_actions]
    critic = [obs_dim + in_extra, *hidden, 1]
    return actor, critic


def _new_set(sid: int, seed: int, actor_sizes, critic_sizes, activation: str) -> ParamSet:
    actor = init_mlp(actor_sizes, np.random.default_rng([seed, sid, 0]), activation, "softmax")
    critic = init_mlp(critic_sizes, np.random.default_rng([seed, sid, 1]), activation, "linear")
    return ParamSet(actor, critic)


def snpps_masks(n_agents: int, hidden: Sequence[int], drop_rate: float, seed: int) -> dict[int, NeuronMask]:
    """i.i.d. Bernoulli(1 - drop_rate) neuron masks, one per agent; an all-zero layer is redrawn."""
    rng = np.random.default_rng([seed, 0x5A9])
    out = {}
    for i in range(n_agents):
        layers = []
        for h in hidden:
            while True:
                bits = (rng.random(h) >= drop_rate).astype(np.int8)
                if bits.any():
                    break
            layers.append(bits)
        out[i] = NeuronMask(tuple(layers))
    return out


def build_bindings(
    strategy: SharingStrategy,
    n_agents: int,
    obs_dim: int,
    n_actions: int,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    seed: int = 0,
    clusters: Optional[ClusterModel] = None,
    registry: Optional[MaskRegistry] = None,
    activation: str = "relu",
    *,
    _single_agent_ok: bool = False,
) -> Bindings:
    """Create the parameter store and per-agent handles for ``strategy``.

    SePS needs ``clusters``; AdaPS needs ``clusters`` and ``registry``.
    """
    hidden = tuple(hidden)
    kind = strategy.kind
    k = strategy.k
    # a lone agent forms its own (only) cluster; allowed for size accounting
    k_limit = n_agents + 1 if (_single_agent_ok and n_agents == 1) else n_agents
    if k is not None and k >= k_limit:
        raise ValueError(f"K={k} must be smaller than N={n_agents}")
    if strategy.needs_identity:
        if clusters is None:
            raise ContractError(f"{kind} needs identity clusters (run the pretraining stage first)")
        if len(clusters.assignments) != n_agents:
            raise ContractError("cluster assignments do not cover every agent")
        if k is not None and clusters.k != k:
            raise ContractError(f"clusters have K={clusters.k}, strategy asks for K={k}")
        k = clusters.k
        if k >= k_limit:
            raise ValueError(f"K={k} must be smaller than N={n_agents}")
    if kind == "AdaPS":
        if registry is None:
            raise ContractError("AdaPS needs a mask registry")
        if set(registry.masks) != set(range(k)) or registry.hidden_sizes != hidden:
            raise ContractError("mask registry does not match the clusters / architecture")

    extra = n_agents if kind == "FuPSId" else 0
    actor_sizes, critic_sizes = _architecture(obs_dim, n_actions, hidden, extra)
    n_sets = {"NoPS": n_agents, "SePS": k}.get(kind, 1)
    store = ParameterStore({s: _new_set(s, seed, actor_sizes, critic_sizes, activation) for s in range(n_sets)})

    masks: dict[int, NeuronMask] = {}
    handles = []
    if kind == "SNPPS":
        drop = 0.0 if strategy.drop_rate is None else strategy.drop_rate
        masks = snpps_masks(n_agents, hidden, drop, strategy.seed)
    elif kind == "AdaPS":
        masks = dict(registry.masks)
    for i in range(n_agents):
        if kind == "NoPS":
            sid, mid = i, None
        elif kind == "SePS":
            sid, mid = int(clusters.assignments[i]), None
        elif kind == "SNPPS":
            sid, mid = 0, i
        elif kind == "AdaPS":
            sid, mid = 0, int(clusters.assignments[i])
        else:
            sid, mid = 0, None
        handles.append(PolicyHandle(i, sid, sid, mid, "onehot" if kind == "FuPSId" else "none"))
    return Bindings(replace(strategy, k=k), store, handles, masks, n_agents)


def _handle_input(b: Bindings, handle: PolicyHandle, observation: np.ndarray) -> np.ndarray:
    x = np.asarray(observation, dtype=np.float64)
    if handle.augment == "onehot":
        x = np.concatenate([x, np.eye(b.n_agents)[handle.agent]])
    return x


def _handle_mask(b: Bindings, handle: PolicyHandle) -> Optional[NeuronMask]:
    if handle.mask_id is None:
        return None
    if handle.mask_id not in b.masks:
        raise ContractError(f"dangling mask id {handle.mask_id}")
    return b.masks[handle.mask_id]


def policy_forward(b: Bindings, handle: PolicyHandle, observation: np.ndarray) -> np.ndarray:
    """Action distribution of one agent for one observation."""
    if handle.actor_id not in b.store.sets:
        raise ContractError(f"dangling parameter set {handle.actor_id}")
    out, _ = forward(b.store.sets[handle.actor_id].actor, _handle_input(b, handle, observation), _handle_mask(b, handle))
    return out


def value_forward(b: Bindings, handle: PolicyHandle, observation: np.ndarray) -> float:
    if handle.critic_id not in b.store.sets:
        raise ContractError(f"dangling parameter set {handle.critic_id}")
    out, _ = forward(b.store.sets[handle.critic_id].critic, _handle_input(b, handle, observation), _handle_mask(b, handle))
    return float(out[0])


def total_trainable_params(store: ParameterStore) -> int:
    return sum(param_count(s.actor) + param_count(s.critic) for s in store.sets.values())


def structural_bindings(
    strategy: SharingStrategy, n_agents: int, obs_dim: int, n_actions: int, hidden: Sequence[int] = DEFAULT_HIDDEN
) -> Bindings:
    """Bindings with placeholder clusters/masks, for size accounting only.

    Parameter counts do not depend on which agent lands in which cluster.
    """
    k = 1 if n_agents == 1 else (strategy.k or 1)
    clusters = ClusterModel(k, np.arange(n_agents) % k, np.zeros((k, 1)), 0.0)
    registry = MaskRegistry({c: NeuronMask.ones(hidden) for c in range(k)}, strategy.lam, 0, tuple(hidden))
    if not strategy.needs_identity:
        clusters = registry = None
    return build_bindings(
        replace(strategy, k=k if strategy.needs_identity else strategy.k),
        n_agents, obs_dim, n_actions, hidden, 0, clusters, registry, _single_agent_ok=True,
    )


def relative_model_size(
    strategy: SharingStrategy, n_agents: int, obs_dim: int, n_actions: int, hidden: Sequence[int] = DEFAULT_HIDDEN
) -> Fraction:
    """Trainable parameters relative to FuPS on the same architecture."""
    own = total_trainable_params(structural_bindings(strategy, n_agents, obs_dim, n_actions, hidden).store)
    base = total_trainable_params(structural_bindings(SharingStrategy("FuPS"), n_agents, obs_dim, n_actions, hidden).store)
    return Fraction(own, base)


def dump_manifest(b: Bindings, path: Union[str, Path]) -> None:
    lines = ["# maskshare binding manifest", f"strategy={b.strategy.kind}", "agent actor critic mask augment"]
    for h in b.handles:
        mask = "-" if h.mask_id is None else str(h.mask_id)
        lines.append(f"{h.agent} {h.actor_id} {h.critic_id} {mask} {h.augment}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: Union[str, Path]) -> tuple[str, list[PolicyHandle]]:
    strategy = ""
    handles = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("agent "):
            continue
        if line.startswith("strategy="):
            strategy = line.split("=", 1)[1]
            continue
        agent, actor, critic, mask, augment = line.split()
        handles.append(PolicyHandle(int(agent), int(actor), int(critic), None if mask == "-" else int(mask), augment))
    return strategy, handles
