"""Acceptance suite.

Each test prints one ``criterion N: PASS|FAIL`` line with the measured numbers,
then asserts. The experiment runs (BPS 3-3-3 and LBF 2-2 over four seeds) are
shared through module fixtures and take roughly half an hour on one core.
"""

import csv
from pathlib import Path

import numpy as np
import pytest

from maskshare.a2c import TrainerConfig, compute_nstep_targets, policy_loss, train, value_loss
from maskshare.cluster import ClusterModel, MappingNetwork, MaskRegistry, build_mask_registry, generate_mask
from maskshare.config import build_config, default_config
from maskshare.envs import EnvSpec, action_dim, obs_dim
from maskshare.harness import load_bindings, pretrain_dir, rebuild_from_artifacts, run, run_dir, size_report
from maskshare.nn import NeuronMask, init_mlp
from maskshare.sharing import SharingStrategy, build_bindings
from maskshare.vae import TransitionDataset, elbo_loss, gaussian_kl, make_decoder, make_encoder
from oracles import central_differences, discounted_targets_bruteforce, relative_error

SEEDS = (0, 1, 2, 3)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def bps_report(tmp_path_factory):
    cfg = default_config(
        "bps", agents=(3, 3, 3), strategies=("AdaPS", "FuPS", "NoPS"), seeds=SEEDS,
        out=str(tmp_path_factory.mktemp("bps333")),
    )
    return run(cfg)


@pytest.fixture(scope="module")
def lbf_report(tmp_path_factory):
    cfg = default_config(
        "lbf", agents=(2, 2), strategies=("AdaPS", "SePS", "NoPS"), seeds=SEEDS,
        out=str(tmp_path_factory.mktemp("lbf22")),
    )
    return run(cfg)


# 1. model size


def test_criterion_1_model_size(capsys):
    spec = EnvSpec("bps", (10, 10, 10))
    rows = {r.strategy: r.relative for r in size_report(
        ("NoPS", "FuPS", "SePS", "AdaPS"), spec.n_agents, 3, obs_dim(spec), action_dim(spec)
    )}
    ok = rows["NoPS"] == 30 and rows["SePS"] == 3 and rows["AdaPS"] == 1 and rows["FuPS"] == 1
    verdict(capsys, 1, ok, f"NoPS/FuPS={rows['NoPS']} SePS/FuPS={rows['SePS']} AdaPS/FuPS={rows['AdaPS']}")


# 2. identity recovery


def test_criterion_2_identity_recovery(capsys, bps_report):
    ari = bps_report.ari
    hits = sum(v >= 0.9 for v in ari.values())
    verdict(capsys, 2, len(ari) == 4 and hits >= 3,
            f"ARI per seed {[round(ari[s], 3) for s in sorted(ari)]}, {hits}/4 >= 0.9")


# 3. differentiation ordering


def test_criterion_3_differentiation(capsys, bps_report):
    assert bps_report.ok, bps_report.failures
    s = bps_report.summary()
    fups, ada, nops = s["FuPS"], s["AdaPS"], s["NoPS"]
    # margin must beat the spread of both strategies being compared
    ok_ada = ada["mean"] - fups["mean"] > max(ada["std"], fups["std"])
    ok_nops = nops["mean"] - fups["mean"] > max(nops["std"], fups["std"])
    detail = " ".join(f"{k} {v['mean']:.3f}+-{v['std']:.3f}" for k, v in s.items())
    verdict(capsys, 3, ok_ada and ok_nops, detail)


# 4. experience sharing ordering


def test_criterion_4_experience_sharing(capsys, lbf_report):
    assert lbf_report.ok, lbf_report.failures
    s = lbf_report.summary()
    ada = s["AdaPS"]
    checks = []
    for other in ("SePS", "NoPS"):
        o = s[other]
        checks.append(ada["mean"] >= o["mean"] - max(ada["std"], o["std"]))
    detail = " ".join(
        f"{k} {v['mean']:.4f}+-{v['std']:.4f} per_type={[round(x, 4) for x in v['per_type']]}" for k, v in s.items()
    )
    verdict(capsys, 4, all(checks), detail)


# 5. mask mechanics


def test_criterion_5_mask_mechanics(capsys, tmp_path):
    hidden = (64, 64)
    net = MappingNetwork(2, sum(hidden), seed=11)
    before = net.net.to_bytes()
    centers = np.random.default_rng(5).normal(size=(100, 2)) * 2
    lams = np.linspace(0.0, 0.95, 20)
    monotone = all_ones = pure = True
    for c in centers:
        probs = net.probabilities(c)
        prev = None
        for lam in lams:
            bits = (probs > lam).astype(np.int8)
            if prev is not None:
                monotone &= bool(np.all(bits <= prev))
            prev = bits
        all_ones &= generate_mask(net, c, 0.0, hidden) == NeuronMask.ones(hidden)
        pure &= generate_mask(net, c, 0.2, hidden) == generate_mask(net, c.copy(), 0.2, hidden)

    # a full AdaPS run with masks from this network must not touch it
    spec = EnvSpec("bps", (2, 2))
    cm = ClusterModel(2, spec.agent_types, np.array([[1.0, -1.0], [-1.0, 1.0]]), 0.0)
    reg, used = build_mask_registry(cm, net, 0.2, hidden)
    b = build_bindings(SharingStrategy("AdaPS", k=2), spec.n_agents, obs_dim(spec), action_dim(spec), hidden, 0, cm, reg)
    train(TrainerConfig(total_steps=4000, eval_interval=2000), spec, b)
    frozen = net.net.to_bytes() == before and used.fingerprint() == reg.mapping_sha256

    # the harness records the mapping network hash next to the masks
    cfg = _tiny_cfg(tmp_path / "run", ("AdaPS",))
    run(cfg)
    stored = MaskRegistry.load(pretrain_dir(cfg.out, 0) / "masks.txt").mapping_sha256
    fresh = MappingNetwork(cfg.vae.latent, sum(cfg.hidden), 0)
    frozen &= stored in {fresh.fingerprint(), fresh.redraw().fingerprint()}

    ok = monotone and all_ones and pure and frozen
    verdict(capsys, 5, ok, f"monotone={monotone} lambda0_all_ones={all_ones} pure={pure} frozen={frozen}")


# 6. numerics


def _fd_ok(f, net, grads, tol=1e-5):
    fd = central_differences(f, net.weights + net.biases, 1e-5)
    return all(relative_error(g, r) < tol for g, r in zip(grads.weights + grads.biases, fd))


def test_criterion_6_numerics(capsys):
    n = 100
    bad = {"policy": 0, "value": 0, "elbo": 0, "targets": 0}
    for seed in range(n):
        rng = np.random.default_rng(seed)
        net = init_mlp([3, 8, 8, 3], rng, "tanh", "softmax")
        x, a, adv = rng.normal(size=(4, 3)), rng.integers(0, 3, 4), rng.normal(size=4)
        _, g, _ = policy_loss(net, x, a, adv, None, 0.01)
        bad["policy"] += not _fd_ok(lambda: policy_loss(net, x, a, adv, None, 0.01)[0], net, g)

        crit = init_mlp([3, 8, 8, 1], rng, "tanh", "linear")
        y = rng.normal(size=4) * 3
        _, g = value_loss(crit, x, y)
        bad["value"] += not _fd_ok(lambda: value_loss(crit, x, y)[0], crit, g)

        m = 6
        ds = TransitionDataset(
            rng.integers(0, 3, m), rng.normal(size=(m, 4)), rng.integers(0, 3, m), rng.normal(size=m),
            rng.normal(size=(m, 4)), 3, 3,
        )
        enc = make_encoder(3, latent=2, seed=seed, hidden=(5, 5))
        dec = make_decoder(4, 3, latent=2, seed=seed, hidden=(6, 6))
        for bias in enc.biases + dec.biases:
            bias += rng.normal(size=bias.shape) * 0.3
        eps = rng.standard_normal((m, 2))
        _, ge, gd = elbo_loss(enc, dec, ds, eps)
        f = lambda: elbo_loss(enc, dec, ds, eps)[0].loss
        bad["elbo"] += not (_fd_ok(f, enc, ge) and _fd_ok(f, dec, gd))

        steps = int(rng.integers(1, 12))
        r, d = rng.normal(size=steps), rng.random(steps) < 0.2
        boot, gamma = float(rng.normal()), float(rng.uniform(0, 1))
        got = compute_nstep_targets(r, d, np.array(boot), gamma)
        ref = discounted_targets_bruteforce(r, d, boot, gamma)
        bad["targets"] += not np.allclose(got, ref, rtol=0, atol=1e-12)

    kl = float(np.asarray(gaussian_kl(np.array([[1.0, 0.0]]), np.zeros((1, 2)))).ravel()[0])
    ok = not any(bad.values()) and abs(kl - 0.5) < 1e-12
    verdict(capsys, 6, ok, f"failures over {n} instances {bad}, KL={kl}")


# 7. mask respect


def test_criterion_7_mask_respect(capsys, bps_report):
    cfg = bps_report.config
    dead_total, changed = 0, []
    for seed in cfg.seeds:
        trained = load_bindings(run_dir(cfg.out, "AdaPS", seed), sum(cfg.agents))
        init = rebuild_from_artifacts(cfg, "AdaPS", seed)
        masks = list(trained.masks.values())
        dead = [np.all([m.layers[l] == 0 for m in masks], axis=0) for l in range(len(cfg.hidden))]
        dead_total += int(sum(d.sum() for d in dead))
        for which in ("actor", "critic"):
            net, ref = getattr(trained.store.sets[0], which), getattr(init.store.sets[0], which)
            for l, off in enumerate(dead):
                same = (
                    np.array_equal(net.weights[l][off], ref.weights[l][off])
                    and np.array_equal(net.biases[l][off], ref.biases[l][off])
                    and np.array_equal(net.weights[l + 1][:, off], ref.weights[l + 1][:, off])
                )
                if not same:
                    changed.append((seed, which, l))
            assert net != ref  # training did move the live parameters
    ok = dead_total > 0 and not changed
    verdict(capsys, 7, ok, f"{dead_total} neurons off in every mask over 4 seeds, changed={changed}")


# 8. determinism


def _tiny_cfg(out, strategies):
    cfg = default_config("bps", agents=(2, 2), strategies=strategies, seeds=(0, 1), out=str(out), eval_episodes=2)
    return build_config(cfg, {}, {"total_steps": 4000, "eval_interval": 1000}, {"samples": 4000, "epochs": 3})


def _metrics_without_timing(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    drop = rows[0].index("wall_ms")
    return [[v for i, v in enumerate(r) if i != drop] for r in rows]


def test_criterion_8_determinism(capsys, tmp_path):
    strategies = ("AdaPS", "SePS", "FuPS", "SNPPS", "NoPS", "FuPSId")
    a = run(_tiny_cfg(tmp_path / "a", strategies))
    b = run(_tiny_cfg(tmp_path / "b", strategies))
    assert a.ok and b.ok
    files = sorted(p.relative_to(a.out_dir) for p in Path(a.out_dir).glob("*/metrics.csv"))
    diffs = [str(p) for p in files if _metrics_without_timing(a.out_dir / p) != _metrics_without_timing(b.out_dir / p)]
    verdict(capsys, 8, len(files) == 12 and not diffs, f"{len(files)} metrics files compared, differing: {diffs}")
