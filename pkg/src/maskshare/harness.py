"""Pipeline orchestration: pretrain -> cluster -> masks -> train -> evaluate -> report.

Output directory layout::

    <out>/config.txt                      echo of the full config
    <out>/pretrain_s<seed>/identities.txt one row per agent (vae module format)
    <out>/pretrain_s<seed>/clusters.txt   "agent cluster" rows
    <out>/pretrain_s<seed>/masks.txt      mask registry (cluster module format)
    <out>/pretrain_s<seed>/vae_loss.csv   epoch, loss
    <out>/<strategy>_s<seed>/metrics.csv  training curve
    <out>/<strategy>_s<seed>/manifest.txt binding manifest
    <out>/<strategy>_s<seed>/masks.txt    masks in use (masked strategies only)
    <out>/<strategy>_s<seed>/identities.txt  copy, identity strategies only
    <out>/<strategy>_s<seed>/set<i>_{actor,critic}.msl  final checkpoints
    <out>/report.csv, summary.csv, ari.csv, size_report.csv

A run's "final return" is the mean training-episode return of the last metrics
row (the end of the learning curve); greedy evaluation is reported alongside.
"""

from __future__ import annotations

import csv
import logging
import os
import shutil
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.metrics import adjusted_rand_score

from . import a2c
from .cluster import ClusterModel, MappingNetwork, MaskRegistry, build_mask_registry, kmeans
from .config import ExperimentConfig, format_config
from .envs import action_dim, obs_dim
from .errors import MaskshareError
from .nn import load_checkpoint, save_checkpoint
from .sharing import (
    STRATEGIES,
    Bindings,
    ParameterStore,
    ParamSet,
    SharingStrategy,
    build_bindings,
    dump_manifest,
    load_manifest,
    relative_model_size,
)
from .vae import (
    IdentityVector,
    collect_pretraining_data,
    dump_identities,
    identity_vectors,
    load_identities,
    make_decoder,
    make_encoder,
    train_vae,
)

log = logging.getLogger(__name__)

THREADS_ENV = "MASKSHARE_THREADS"
DROP_PROBES = 256


class StageError(MaskshareError):
    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage
        self.message = message


@dataclass
class PretrainResult:
    seed: int
    samples: int
    identities: list[IdentityVector]
    clusters: ClusterModel
    registry: MaskRegistry
    ari: float
    vae_history: list[float]
    directory: Path


@dataclass
class RunRecord:
    strategy: str
    seed: int
    metrics_path: str
    final_return: float
    final_per_type: list[float]
    eval_return: Optional[float]
    eval_per_type: Optional[list[float]]
    relative_size: Fraction
    pretrain_samples: int
    update_counts: dict[int, int]


@dataclass
class StageFailure:
    strategy: str
    seed: int
    stage: str
    message: str


@dataclass
class RunReport:
    config: ExperimentConfig
    out_dir: Path
    records: list[RunRecord] = field(default_factory=list)
    failures: list[StageFailure] = field(default_factory=list)
    ari: dict[int, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def returns(self, strategy: str, kind: str = "final") -> np.ndarray:
        attr = "final_return" if kind == "final" else "eval_return"
        return np.array([getattr(r, attr) for r in self.records if r.strategy == strategy], dtype=np.float64)

    def summary(self) -> dict[str, dict[str, float]]:
        """min / mean / max / std of the final return across seeds, per strategy."""
        out = {}
        for s in dict.fromkeys(r.strategy for r in self.records):
            v = self.returns(s)
            per_type = np.mean([r.final_per_type for r in self.records if r.strategy == s], axis=0)
            out[s] = {
                "n": len(v),
                "min": float(v.min()),
                "mean": float(v.mean()),
                "max": float(v.max()),
                "std": float(v.std()),
                "per_type": [float(x) for x in per_type],
            }
        return out


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# pretraining


def pretrain_dir(out: Union[str, Path], seed: int) -> Path:
    return Path(out) / f"pretrain_s{seed}"


def run_pretrain(cfg: ExperimentConfig, seed: int) -> PretrainResult:
    """Collect data, fit the identity VAE, cluster the codes and derive masks; writes artifacts."""
    spec = cfg.env_spec(seed)
    v = cfg.vae
    ds = collect_pretraining_data(spec, v.samples, seed)
    enc = make_encoder(spec.n_agents, v.latent, seed)
    dec = make_decoder(ds.obs_dim, ds.n_actions, v.latent, seed)
    _, _, history = train_vae(enc, dec, ds, v.epochs, v.lr, seed, v.batch_size)
    ids = identity_vectors(enc, v.identity_mode, seed)
    clusters = kmeans(ids, cfg.k, seed)
    registry, _ = build_mask_registry(clusters, MappingNetwork(v.latent, sum(cfg.hidden), seed), cfg.lam, cfg.hidden)
    ari = float(adjusted_rand_score(spec.agent_types, clusters.assignments))

    d = pretrain_dir(cfg.out, seed)
    d.mkdir(parents=True, exist_ok=True)
    dump_identities(ids, d / "identities.txt")
    _dump_clusters(clusters, d / "clusters.txt")
    registry.dump(d / "masks.txt")
    save_checkpoint(enc, d / "encoder.msl")
    with open(d / "vae_loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerows([e, repr(x)] for e, x in enumerate(history))
    log.info("pretrain seed %d: %d samples, ARI %.3f", seed, len(ds), ari)
    return PretrainResult(seed, len(ds), ids, clusters, registry, ari, history, d)


def _dump_clusters(model: ClusterModel, path: Path) -> None:
    lines = ["# agent cluster"] + [f"{i} {int(c)}" for i, c in enumerate(model.assignments)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_assignments(path: Path) -> np.ndarray:
    rows = [l.split() for l in path.read_text(encoding="utf-8").splitlines() if l and not l.startswith("#")]
    return np.array([int(c) for _, c in sorted((int(a), c) for a, c in rows)], dtype=np.int64)


def _clusters_from(assignments: np.ndarray, vectors: Optional[np.ndarray], k: int) -> ClusterModel:
    if vectors is None:
        return ClusterModel(k, assignments, np.zeros((k, 1)), 0.0)
    centers = np.stack(
        [vectors[assignments == c].mean(axis=0) if (assignments == c).any() else vectors.mean(axis=0) for c in range(k)]
    )
    wcss = float(((vectors - centers[assignments]) ** 2).sum())
    return ClusterModel(k, assignments, centers, wcss)


def load_pretrain(cfg: ExperimentConfig, seed: int) -> PretrainResult:
    d = pretrain_dir(cfg.out, seed)
    ids = load_identities(d / "identities.txt")
    assignments = _load_assignments(d / "clusters.txt")
    registry = MaskRegistry.load(d / "masks.txt")
    clusters = _clusters_from(assignments, np.array([v.z for v in ids]), len(registry))
    ari = float(adjusted_rand_score(cfg.env_spec(seed).agent_types, assignments))
    return PretrainResult(seed, cfg.vae.samples, ids, clusters, registry, ari, [], d)


def measured_drop_rate(cfg: ExperimentConfig, seed: int) -> float:
    """Fraction of hidden neurons the mapping network drops at ``cfg.lam``.

    Probed with standard-normal centers, which is the scale that standardized
    cluster centers have.
    """
    net = MappingNetwork(cfg.vae.latent, sum(cfg.hidden), seed)
    centers = np.random.default_rng([seed, 0xD20]).standard_normal((DROP_PROBES, cfg.vae.latent))
    probs = np.stack([net.probabilities(c) for c in centers])
    return float(np.mean(probs <= cfg.lam))


# training


def run_dir(out: Union[str, Path], strategy: str, seed: int) -> Path:
    return Path(out) / f"{SharingStrategy(strategy).kind}_s{seed}"


def make_bindings(cfg: ExperimentConfig, strategy: str, seed: int, pre: Optional[PretrainResult]) -> Bindings:
    spec = cfg.env_spec(seed)
    strat = cfg.strategy(strategy, seed)
    if strat.kind == "SNPPS" and strat.drop_rate is None:
        strat = replace(strat, drop_rate=measured_drop_rate(cfg, seed))
    clusters = pre.clusters if pre is not None else None
    registry = pre.registry if pre is not None else None
    return build_bindings(
        strat, spec.n_agents, obs_dim(spec), action_dim(spec), cfg.hidden, seed,
        clusters if strat.needs_identity else None, registry if strat.kind == "AdaPS" else None,
    )


def save_bindings(b: Bindings, directory: Path) -> None:
    dump_manifest(b, directory / "manifest.txt")
    if b.masks:
        MaskRegistry(dict(b.masks), b.strategy.lam, b.strategy.seed, b.store.sets[0].actor.hidden_sizes).dump(
            directory / "masks.txt"
        )
    for sid, s in b.store.sets.items():
        save_checkpoint(s.actor, directory / f"set{sid}_actor.msl")
        save_checkpoint(s.critic, directory / f"set{sid}_critic.msl")


def load_bindings(directory: Union[str, Path], n_agents: int) -> Bindings:
    """Rebuild trained bindings from a run directory (manifest, masks, checkpoints)."""
    directory = Path(directory)
    name, handles = load_manifest(directory / "manifest.txt")
    masks = {}
    lam, mseed = 0.2, 0
    if (directory / "masks.txt").exists():
        reg = MaskRegistry.load(directory / "masks.txt")
        masks, lam, mseed = dict(reg.masks), reg.lam, reg.seed
    sets = {}
    for sid in sorted({h.actor_id for h in handles}):
        sets[sid] = ParamSet(
            load_checkpoint(directory / f"set{sid}_actor.msl"), load_checkpoint(directory / f"set{sid}_critic.msl")
        )
    k = len(sets) if name == "SePS" else (len(masks) if name == "AdaPS" else None)
    strategy = SharingStrategy(name, k=k, lam=lam, seed=mseed)
    return Bindings(strategy, ParameterStore(sets), handles, masks, n_agents)


def rebuild_from_artifacts(cfg: ExperimentConfig, strategy: str, seed: int) -> Bindings:
    """Fresh (untrained) bindings from a run's manifest and masks, without rerunning pretraining."""
    d = run_dir(cfg.out, strategy, seed)
    _, handles = load_manifest(d / "manifest.txt")
    strat = cfg.strategy(strategy, seed)
    spec = cfg.env_spec(seed)
    pre = None
    if strat.needs_identity:
        if strat.kind == "AdaPS":
            registry = MaskRegistry.load(d / "masks.txt")
            assignments = np.array([h.mask_id for h in handles], dtype=np.int64)
        else:
            registry = None
            assignments = np.array([h.actor_id for h in handles], dtype=np.int64)
        ids = load_identities(d / "identities.txt")
        clusters = _clusters_from(assignments, np.array([v.z for v in ids]), cfg.k)
        pre = PretrainResult(seed, 0, ids, clusters, registry, float("nan"), [], d)
    return make_bindings(cfg, strategy, seed, pre)


def train_strategy(cfg: ExperimentConfig, strategy: str, seed: int, pre: Optional[PretrainResult]) -> RunRecord:
    """Train one (strategy, seed) pair and write its artifacts; raises StageError."""
    kind = SharingStrategy(strategy).kind
    spec = cfg.env_spec(seed)
    d = run_dir(cfg.out, kind, seed)
    d.mkdir(parents=True, exist_ok=True)
    try:
        b = make_bindings(cfg, kind, seed, pre)
    except Exception as exc:
        raise StageError("bindings", f"{type(exc).__name__}: {exc}") from exc
    if pre is not None and b.strategy.needs_identity:
        shutil.copyfile(pre.directory / "identities.txt", d / "identities.txt")
    dump_manifest(b, d / "manifest.txt")

    metrics_path = d / "metrics.csv"
    metrics_path.unlink(missing_ok=True)
    writer = a2c.MetricsWriter(metrics_path, spec.n_types)
    try:
        res = a2c.train(replace(cfg.trainer, seed=seed), spec, b, writer, kind)
    except Exception as exc:
        raise StageError("train", f"{type(exc).__name__}: {exc}") from exc
    finally:
        writer.close()
    save_bindings(b, d)

    try:
        ev = a2c.evaluate(b, spec, cfg.eval_episodes, seed)
    except Exception as exc:
        raise StageError("evaluate", f"{type(exc).__name__}: {exc}") from exc
    last = res.metrics[-1]
    size = relative_model_size(cfg.strategy(kind, seed), spec.n_agents, obs_dim(spec), action_dim(spec), cfg.hidden)
    return RunRecord(
        kind, seed, str(metrics_path), last.mean_return, list(last.per_type_return), ev.mean, ev.per_type, size,
        pre.samples if (pre is not None and b.strategy.needs_identity) else 0, res.update_counts,
    )


def _pretrain_job(args) -> Union[PretrainResult, StageFailure]:
    cfg, seed = args
    try:
        return run_pretrain(cfg, seed)
    except Exception as exc:
        log.debug("pretrain failed:\n%s", traceback.format_exc())
        return StageFailure("*", seed, "pretrain", f"{type(exc).__name__}: {exc}")


def _train_job(args) -> Union[RunRecord, StageFailure]:
    cfg, strategy, seed, pre = args
    try:
        return train_strategy(cfg, strategy, seed, pre)
    except StageError as exc:
        return StageFailure(strategy, seed, exc.stage, exc.message)


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def pretrain_all(cfg: ExperimentConfig, workers: Optional[int] = None) -> tuple[dict[int, PretrainResult], list[StageFailure]]:
    results = _map(_pretrain_job, [(cfg, s) for s in cfg.seeds], workers or worker_count())
    done, failed = {}, []
    for seed, r in zip(cfg.seeds, results):
        (failed.append(r) if isinstance(r, StageFailure) else done.__setitem__(seed, r))
    return done, failed


def run(
    cfg: ExperimentConfig,
    workers: Optional[int] = None,
    reuse_pretrain: bool = False,
) -> RunReport:
    """Execute the configured experiment; stage failures are recorded and later runs still execute."""
    workers = workers or worker_count()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    report = RunReport(cfg, out)

    pre: dict[int, PretrainResult] = {}
    if cfg.uses_identity:
        todo = list(cfg.seeds)
        if reuse_pretrain:
            for s in cfg.seeds:
                if (pretrain_dir(out, s) / "masks.txt").exists():
                    pre[s] = load_pretrain(cfg, s)
            todo = [s for s in cfg.seeds if s not in pre]
        fresh, failed = pretrain_all(replace(cfg, seeds=tuple(todo)), workers) if todo else ({}, [])
        pre.update(fresh)
        for f in failed:
            for strat in cfg.strategies:
                if SharingStrategy(strat).needs_identity:
                    report.failures.append(replace(f, strategy=strat))
        report.ari = {s: p.ari for s, p in sorted(pre.items())}

    jobs = []
    for strat in cfg.strategies:
        needs = SharingStrategy(strat).needs_identity
        for seed in cfg.seeds:
            if needs and seed not in pre:
                continue  # its pretraining failure is already on record
            jobs.append((cfg, strat, seed, pre.get(seed) if needs else None))
    for r in _map(_train_job, jobs, workers):
        (report.failures if isinstance(r, StageFailure) else report.records).append(r)
    write_report(report)
    return report


def write_report(report: RunReport) -> None:
    out = report.out_dir
    n_types = len(report.config.agents)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["strategy", "seed", "final_return"]
            + [f"final_type_{k}" for k in range(n_types)]
            + ["eval_return", "relative_size", "pretrain_samples", "metrics"]
        )
        for r in report.records:
            w.writerow(
                [r.strategy, r.seed, repr(r.final_return), *map(repr, r.final_per_type), repr(r.eval_return),
                 repr(float(r.relative_size)), r.pretrain_samples, r.metrics_path]
            )
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "n", "min", "mean", "max", "std"] + [f"mean_type_{k}" for k in range(n_types)])
        for s, row in report.summary().items():
            w.writerow([s, row["n"], *(repr(row[c]) for c in ("min", "mean", "max", "std")), *map(repr, row["per_type"])])
    if report.ari:
        with open(out / "ari.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "ari"])
            w.writerows([s, repr(a)] for s, a in report.ari.items())
    if report.failures:
        lines = [f"{f.strategy}\t{f.seed}\t{f.stage}\t{f.message}" for f in report.failures]
        (out / "failures.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


# model size


@dataclass(frozen=True)
class SizeRow:
    strategy: str
    relative: Fraction


def size_report(
    strategies: Sequence[str],
    n_agents: int,
    k: int,
    obs_size: int,
    n_actions: int,
    hidden: Sequence[int] = (64, 64),
    path: Optional[Union[str, Path]] = None,
) -> list[SizeRow]:
    """Trainable parameters of each strategy relative to FuPS; optionally written as CSV."""
    rows = []
    for name in strategies:
        kind = SharingStrategy(name).kind
        strat = SharingStrategy(kind, k=k if kind in ("SePS", "AdaPS") and n_agents > 1 else None)
        rows.append(SizeRow(kind, relative_model_size(strat, n_agents, obs_size, n_actions, hidden)))
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", "relative_size", "exact"])
            for r in rows:
                w.writerow([r.strategy, repr(float(r.relative)), str(r.relative)])
    return rows


def config_size_report(cfg: ExperimentConfig, path: Optional[Union[str, Path]] = None) -> list[SizeRow]:
    spec = cfg.env_spec()
    return size_report(STRATEGIES, spec.n_agents, cfg.k, obs_dim(spec), action_dim(spec), cfg.hidden, path)
