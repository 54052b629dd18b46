"""Command line entry point: ``maskshare {pretrain,train,evaluate,size-report,all}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import a2c
from .config import ExperimentConfig, build_config, format_config, load_config
from .harness import RunReport, config_size_report, load_bindings, pretrain_all, run, run_dir
from .sharing import SharingStrategy

log = logging.getLogger("maskshare")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value experiment config file")
    common.add_argument("--env", choices=["bps", "lbf"])
    common.add_argument("--agents", type=_ints, help="agents per type, e.g. 3,3,3")
    common.add_argument("--strategy", type=_names, help="one or more of NoPS,FuPS,FuPSId,SePS,SNPPS,AdaPS")
    common.add_argument("--clusters", type=int, help="K (default: number of agent types)")
    common.add_argument("--lambda", dest="lam", type=float, help="mask drop threshold (default 0.2)")
    common.add_argument("--seeds", type=_ints, help="comma separated seeds")
    common.add_argument("--steps", type=int, help="environment steps per training run")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="maskshare", description="Adaptive parameter sharing experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="collect data, train the identity VAE, cluster, build masks")
    sub.add_parser("train", parents=[common], help="train strategies (pretraining reused from --out if present)")
    ev = sub.add_parser("evaluate", parents=[common], help="greedy evaluation of trained runs in --out")
    ev.add_argument("--episodes", type=int, default=None)
    sub.add_parser("size-report", parents=[common], help="relative model size of every strategy")
    sub.add_parser("all", parents=[common], help="full pipeline and report")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = load_config(args.config) if args.config else None
    top = {}
    if args.env:
        top["env"] = args.env
    if args.agents:
        top["agents"] = args.agents
    if args.strategy:
        top["strategies"] = args.strategy
    if args.clusters is not None:
        top["clusters"] = args.clusters
    if args.lam is not None:
        top["lam"] = args.lam
    if args.seeds:
        top["seeds"] = args.seeds
    if args.out:
        top["out"] = args.out
    trainer = {"total_steps": args.steps} if args.steps is not None else {}
    if args.steps is not None and args.steps < (base.trainer.eval_interval if base else 10_000):
        trainer["eval_interval"] = args.steps
    return build_config(base, top, trainer)


def _fail(stage: str, message: str) -> int:
    print(f"maskshare: stage {stage} failed: {message}", file=sys.stderr)
    return 1


def _print_summary(report: RunReport) -> None:
    for seed, ari in report.ari.items():
        print(f"pretrain seed={seed} ari={ari:.3f}")
    for s, row in report.summary().items():
        print(f"{s:7s} n={row['n']} final mean={row['mean']:.4f} min={row['min']:.4f} max={row['max']:.4f} std={row['std']:.4f}")
    for f in report.failures:
        print(f"FAILED {f.strategy} seed={f.seed} stage={f.stage}: {f.message}", file=sys.stderr)


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    done, failed = pretrain_all(cfg)
    for seed, r in sorted(done.items()):
        print(f"seed={seed} samples={r.samples} ari={r.ari:.3f} dir={r.directory}")
    if failed:
        return _fail("pretrain", "; ".join(f"seed {f.seed}: {f.message}" for f in failed))
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    report = run(cfg, reuse_pretrain=True)
    _print_summary(report)
    if report.failures:
        f = report.failures[0]
        return _fail(f.stage, f"{f.strategy} seed {f.seed}: {f.message}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, episodes: Optional[int]) -> int:
    episodes = episodes or cfg.eval_episodes
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["strategy", "seed", "mean_return"] + [f"type_{k}" for k in range(len(cfg.agents))])
    for strat in cfg.strategies:
        for seed in cfg.seeds:
            spec = cfg.env_spec(seed)
            try:
                b = load_bindings(run_dir(cfg.out, strat, seed), spec.n_agents)
                ev = a2c.evaluate(b, spec, episodes, seed)
            except Exception as exc:
                return _fail("evaluate", f"{strat} seed {seed}: {type(exc).__name__}: {exc}")
            w.writerow([SharingStrategy(strat).kind, seed, f"{ev.mean:.6f}", *(f"{v:.6f}" for v in ev.per_type)])
    return 0


def cmd_size_report(cfg: ExperimentConfig, write: bool) -> int:
    path = None
    if write:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        path = Path(cfg.out) / "size_report.csv"
    rows = config_size_report(cfg, path)
    print("strategy,relative_size,exact")
    for r in rows:
        print(f"{r.strategy},{float(r.relative)!r},{r.relative}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError) as exc:
        return _fail("config", str(exc))
    log.info("config:\n%s", format_config(cfg))
    if args.command == "pretrain":
        if not cfg.uses_identity:
            cfg = replace(cfg, strategies=("AdaPS",))
        return cmd_pretrain(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.episodes)
    if args.command == "size-report":
        return cmd_size_report(cfg, write=bool(args.out))
    if args.command == "all":
        report = run(cfg)
        _print_summary(report)
        config_size_report(cfg, report.out_dir / "size_report.csv")
        if report.failures:
            f = report.failures[0]
            return _fail(f.stage, f"{f.strategy} seed {f.seed}: {f.message}")
        return 0
    return _fail("cli", f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
