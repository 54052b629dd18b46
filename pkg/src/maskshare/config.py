"""Experiment configuration as flat ``key = value`` text.

Grammar, one entry per line::

    line    := blank | "#" comment | key "=" value
    key     := name | section "." name          (section: trainer, vae)
    value   := scalar | scalar "," scalar ...   (lists are comma separated)

Unknown keys are rejected. Example::

    env = bps
    agents = 3, 3, 3
    strategies = AdaPS, FuPS, NoPS
    seeds = 0, 1, 2, 3
    lambda = 0.2
    trainer.total_steps = 200000
    vae.epochs = 30
    out = runs/bps

Trainer values not given fall back to the per-environment preset in
``TRAINER_PRESETS``; ``format_config`` writes every field, so its output
parses back to an equal config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

from .a2c import TrainerConfig
from .cluster import DEFAULT_LAMBDA
from .envs import EnvSpec
from .sharing import STRATEGIES, SharingStrategy

# LBF rewards sum to 1 per episode, so advantages are ~100x smaller than on BPS
TRAINER_PRESETS: dict[str, dict[str, Any]] = {
    "bps": {},
    "lbf": {"lr": 2e-3, "entropy_coef": 0.001, "total_steps": 300_000},
}


@dataclass(frozen=True)
class VaeSettings:
    latent: int = 2
    epochs: int = 30
    samples: int = 50_000
    lr: float = 1e-3
    batch_size: int = 256
    identity_mode: str = "mean"

    def __post_init__(self) -> None:
        if self.latent < 1 or self.epochs < 0 or self.samples < 1:
            raise ValueError("vae latent and samples must be >= 1, epochs >= 0")
        if self.identity_mode not in ("mean", "sample"):
            raise ValueError("vae.identity_mode must be 'mean' or 'sample'")


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "bps"
    agents: tuple[int, ...] = (3, 3, 3)
    horizon: Optional[int] = None
    grid_size: int = 8
    n_food: int = 3
    strategies: tuple[str, ...] = ("AdaPS",)
    seeds: tuple[int, ...] = (0,)
    clusters: Optional[int] = None  # K; defaults to the number of agent types
    lam: float = DEFAULT_LAMBDA
    hidden: tuple[int, ...] = (64, 64)
    snpps_drop_rate: Optional[float] = None  # None: measured from the mapping network
    eval_episodes: int = 20
    out: str = "runs"
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    vae: VaeSettings = field(default_factory=VaeSettings)

    def __post_init__(self) -> None:
        if not self.strategies:
            raise ValueError("strategies must not be empty")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        object.__setattr__(self, "strategies", tuple(SharingStrategy(s).kind for s in self.strategies))
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lambda must lie in [0, 1)")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        self.env_spec()  # validates env, agents, horizon
        k = self.k
        if self.uses_identity and not 1 <= k < sum(self.agents):
            raise ValueError(f"clusters K={k} must satisfy 1 <= K < N={sum(self.agents)}")

    @property
    def k(self) -> int:
        return self.clusters if self.clusters is not None else len(self.agents)

    @property
    def uses_identity(self) -> bool:
        return any(SharingStrategy(s).needs_identity for s in self.strategies)

    def env_spec(self, seed: int = 0) -> EnvSpec:
        return EnvSpec(self.env, self.agents, self.horizon, seed, self.grid_size, self.n_food)

    def strategy(self, name: str, seed: int) -> SharingStrategy:
        kind = SharingStrategy(name).kind
        k = self.k if kind in ("SePS", "AdaPS") else None
        drop = self.snpps_drop_rate if kind == "SNPPS" else None
        return SharingStrategy(kind, k=k, lam=self.lam, drop_rate=drop, seed=seed)


_TOP = {
    "env": "env",
    "agents": "agents",
    "horizon": "horizon",
    "grid_size": "grid_size",
    "n_food": "n_food",
    "strategies": "strategies",
    "strategy": "strategies",
    "seeds": "seeds",
    "clusters": "clusters",
    "lambda": "lam",
    "hidden": "hidden",
    "snpps_drop_rate": "snpps_drop_rate",
    "eval_episodes": "eval_episodes",
    "out": "out",
}
_INT_LISTS = {"agents", "seeds", "hidden"}
_OPTIONAL = {"horizon", "clusters", "snpps_drop_rate"}


def _convert(value: str, proto: Any, name: str) -> Any:
    if isinstance(proto, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(proto, int):
        return int(value)
    if isinstance(proto, float):
        return float(value)
    return value


def _field_types(cls) -> dict[str, Any]:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse config text; keys not present keep the value from ``base`` (or the defaults)."""
    top: dict[str, Any] = {}
    trainer: dict[str, Any] = {}
    vae: dict[str, Any] = {}
    tr_types, vae_types = _field_types(TrainerConfig), _field_types(VaeSettings)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key.startswith("trainer."):
            name = key[len("trainer."):]
            if name not in tr_types:
                raise ValueError(f"line {lineno}: unknown trainer key {name!r}")
            trainer[name] = _convert(value, tr_types[name], name)
        elif key.startswith("vae."):
            name = key[len("vae."):]
            if name not in vae_types:
                raise ValueError(f"line {lineno}: unknown vae key {name!r}")
            vae[name] = _convert(value, vae_types[name], name)
        elif key in _TOP:
            name = _TOP[key]
            if name in _OPTIONAL and value.lower() in ("", "none", "auto"):
                top[name] = None
            elif name in _INT_LISTS:
                top[name] = tuple(int(v) for v in value.split(",") if v.strip())
            elif name == "strategies":
                top[name] = tuple(v.strip() for v in value.split(",") if v.strip())
            elif name == "lam" or name == "snpps_drop_rate":
                top[name] = float(value)
            elif name in ("horizon", "clusters", "grid_size", "n_food", "eval_episodes"):
                top[name] = int(value)
            else:
                top[name] = value
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return build_config(base, top, trainer, vae)


def build_config(
    base: Optional[ExperimentConfig],
    top: dict[str, Any],
    trainer: Optional[dict[str, Any]] = None,
    vae: Optional[dict[str, Any]] = None,
) -> ExperimentConfig:
    """Apply overrides; a change of environment re-applies that environment's trainer preset."""
    base = base or ExperimentConfig()
    env = top.get("env", base.env)
    if base.trainer == TrainerConfig(**TRAINER_PRESETS.get(base.env, {})) or env != base.env:
        tr = TrainerConfig(**TRAINER_PRESETS.get(env, {}))
    else:
        tr = base.trainer
    tr = replace(tr, **(trainer or {}))
    v = replace(base.vae, **(vae or {}))
    return replace(base, **top, trainer=tr, vae=v)


def default_config(env: str = "bps", **kw) -> ExperimentConfig:
    return build_config(None, {"env": env, **kw})


def _fmt(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: ExperimentConfig) -> str:
    """Full config text; ``parse_config(format_config(c)) == c``."""
    inverse = {v: k for k, v in _TOP.items() if k != "strategy"}
    lines = ["# maskshare experiment config"]
    for f in fields(ExperimentConfig):
        if f.name in ("trainer", "vae"):
            continue
        lines.append(f"{inverse[f.name]} = {_fmt(getattr(cfg, f.name))}")
    for section in ("trainer", "vae"):
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


__all__ = [
    "ExperimentConfig",
    "STRATEGIES",
    "TRAINER_PRESETS",
    "VaeSettings",
    "build_config",
    "default_config",
    "format_config",
    "load_config",
    "parse_config",
]
