import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.cluster import KMeans

from maskshare.cluster import (
    ClusterModel,
    MappingNetwork,
    MaskRegistry,
    build_mask_registry,
    generate_mask,
    kmeans,
)
from maskshare.errors import MaskConfigurationError
from maskshare.nn import MlpParameters
from oracles import best_two_partition

HIDDEN = (64, 64)


def test_kmeans_four_points_matches_bruteforce():
    pts = [(0, 0), (0.1, 0), (5, 5), (5.1, 5)]
    wcss, labels = best_two_partition(pts)
    model = kmeans(pts, 2, seed=0)
    # same partition up to relabeling
    assert len(set(zip(model.assignments, labels))) == 2
    assert model.wcss == pytest.approx(wcss)
    centers = sorted(map(tuple, np.round(model.centers, 12)))
    assert centers == [(0.05, 0.0), (5.05, 5.0)]


def test_kmeans_k1_is_global_mean():
    x = np.random.default_rng(0).normal(size=(7, 3))
    model = kmeans(x, 1)
    np.testing.assert_allclose(model.centers[0], x.mean(axis=0))
    assert (model.assignments == 0).all()


def test_kmeans_identical_points_degenerate():
    x = np.ones((5, 2))
    model = kmeans(x, 2, seed=3)
    sizes = np.bincount(model.assignments, minlength=2)
    assert sorted(sizes) == [0, 5]
    assert model.wcss == 0.0


def test_kmeans_rejects_k_ge_n():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 3)


def test_kmeans_deterministic_and_centers_are_means():
    x = np.random.default_rng(1).normal(size=(30, 2))
    a, b = kmeans(x, 4, seed=9), kmeans(x, 4, seed=9)
    assert np.array_equal(a.assignments, b.assignments)
    for k in range(4):
        np.testing.assert_allclose(a.centers[k], x[a.assignments == k].mean(axis=0))


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_wcss_monotone_and_competitive_with_sklearn(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(c, 0.5, size=(15, 2)) for c in ((0, 0), (3, 0), (0, 3), (3, 3))])
    model = kmeans(x, 4, seed=seed)
    assert all(b <= a + 1e-12 for a, b in zip(model.history, model.history[1:]))
    ref = KMeans(4, n_init=10, random_state=seed).fit(x)
    assert model.wcss <= ref.inertia_ * (1 + 1e-9)


def _constant_mapping(logit, out_dim=4, in_dim=2):
    mn = MappingNetwork(in_dim, out_dim, seed=0)
    mn.net = MlpParameters(
        (in_dim, 3, out_dim),
        [np.zeros((3, in_dim)), np.zeros((out_dim, 3))],
        [np.zeros(3), np.full(out_dim, float(logit))],
    )
    return mn


def test_sigmoid_minus_two_is_dropped_at_default_lambda():
    mn = _constant_mapping(-2.0)
    p = mn.probabilities(np.zeros(2))
    assert p[0] == pytest.approx(0.11920292202211755, abs=1e-15)
    mn.net.biases[1][:] = [-2.0, 0.0, 3.0, -1.0]
    mask = generate_mask(mn, np.zeros(2), 0.2, (2, 2))
    assert mask.bitstring() == "0111"


def test_lambda_zero_all_ones_and_lambda_one_rejected():
    mn = MappingNetwork(2, sum(HIDDEN), seed=4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = rng.normal(size=2) * 5
        assert generate_mask(mn, c, 0.0, HIDDEN).flat().all()
        with pytest.raises(MaskConfigurationError, match="smaller lambda"):
            generate_mask(mn, c, 1.0, HIDDEN)


def test_generate_mask_shape_checks():
    mn = MappingNetwork(2, 10, seed=0)
    with pytest.raises(ValueError):
        generate_mask(mn, np.zeros(3), 0.2, (5, 5))
    with pytest.raises(ValueError):
        generate_mask(mn, np.zeros(2), 0.2, (5, 6))
    with pytest.raises(ValueError):
        generate_mask(mn, np.zeros(2), -0.1, (5, 5))


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    lam=st.tuples(st.floats(0.0, 0.9), st.floats(0.0, 0.9)),
)
def test_mask_monotone_in_lambda(seed, lam):
    lo, hi = sorted(lam)
    mn = MappingNetwork(2, sum(HIDDEN), seed=seed % 1000)
    c = np.random.default_rng(seed).normal(size=2) * 2
    p = mn.probabilities(c)
    bits_lo = p > lo
    bits_hi = p > hi
    assert (bits_hi <= bits_lo).all()
    try:
        m_hi = generate_mask(mn, c, hi, HIDDEN)
    except MaskConfigurationError:
        return
    m_lo = generate_mask(mn, c, lo, HIDDEN)
    assert (m_hi.flat() <= m_lo.flat()).all()


def test_mask_purity():
    mn = MappingNetwork(2, sum(HIDDEN), seed=1)
    c = np.array([0.3, -1.2])
    assert generate_mask(mn, c, 0.2, HIDDEN) == generate_mask(mn, c.copy(), 0.2, HIDDEN)
    model = ClusterModel(2, np.array([0, 0, 1, 1]), np.array([[1.0, 2.0], [1.0, 2.0]]), 0.0)
    reg, _ = build_mask_registry(model, mn, 0.2, HIDDEN)
    assert reg[0] == reg[1]


def test_mapping_network_is_frozen():
    mn = MappingNetwork(2, 8, seed=0)
    before = mn.net.to_bytes()
    with pytest.raises(ValueError):
        mn.net.weights[0][0, 0] = 1.0
    generate_mask(mn, np.ones(2), 0.2, (4, 4))
    assert mn.net.to_bytes() == before


def test_distinct_centers_give_distinct_masks_across_seeds():
    model = ClusterModel(3, np.array([0, 1, 2, 0]), np.array([[-3.0, 0.0], [3.0, 0.0], [0.0, 5.0]]), 0.0)
    for seed in range(100):
        reg, _ = build_mask_registry(model, MappingNetwork(2, sum(HIDDEN), seed=seed), 0.2, HIDDEN)
        assert len({reg[k].bitstring() for k in range(3)}) == 3, seed


def test_registry_redraws_on_empty_layer():
    model = ClusterModel(2, np.array([0, 1, 1]), np.array([[0.0, 1.0], [2.0, 0.0]]), 0.0)
    # hidden layer of width 1 is easily emptied; the redraw loop must find a seed or fail loudly
    try:
        reg, net = build_mask_registry(model, MappingNetwork(2, 2, seed=0), 0.45, (1, 1))
    except MaskConfigurationError as e:
        assert "smaller lambda" in str(e)
    else:
        assert reg.seed == net.seed >= 0
        assert all(m.flat().all() for m in reg.masks.values())
    with pytest.raises(MaskConfigurationError):
        build_mask_registry(model, MappingNetwork(2, 128, seed=0), 1.0, HIDDEN)


def test_registry_file_roundtrip(tmp_path):
    model = kmeans(np.random.default_rng(0).normal(size=(9, 2)), 3)
    reg, net = build_mask_registry(model, MappingNetwork(2, sum(HIDDEN), seed=7), 0.2, HIDDEN)
    path = tmp_path / "masks.txt"
    reg.dump(path)
    text = path.read_text().splitlines()
    assert text[1] == "lambda=0.2" and text[3] == "hidden=64,64"
    assert len([l for l in text if l[0].isdigit()]) == 3
    loaded = MaskRegistry.load(path)
    assert loaded == reg
    assert loaded.mapping_sha256 == net.fingerprint()
