"""K-means over identity vectors and cluster-center -> binary subnetwork masks.

A fixed, randomly initialized mapping network turns a cluster center into one
activation probability per hidden neuron of the policy architecture; a neuron
is kept iff its probability is strictly greater than the drop threshold.

Mask file layout (text)::

    # maskshare mask registry
    lambda=<float>
    seed=<mapping seed actually used>
    hidden=<h1>,<h2>,...
    mapping_sha256=<hex digest of the mapping network checkpoint bytes>
    <cluster id> <0/1 string, hidden layers concatenated in order>
    ...
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.special import expit

from .errors import MaskConfigurationError
from .nn import MlpParameters, NeuronMask, forward, init_mlp

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.2
MAPPING_HIDDEN = 64
# scales the Glorot limits of both mapping layers so that standardized centers
# produce pre-sigmoid outputs of order one around logit(0.2)
MAPPING_GAIN = 5.0
MAX_REDRAWS = 5


@dataclass(frozen=True)
class ClusterModel:
    k: int
    assignments: np.ndarray  # (N,) cluster id per agent
    centers: np.ndarray  # (K, m)
    wcss: float
    # WCSS after each assignment step of the winning restart
    history: tuple[float, ...] = field(default=(), compare=False)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == cluster)


def _as_matrix(vectors) -> np.ndarray:
    rows = [getattr(v, "z", v) for v in vectors]
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must form an (N, m) array")
    return x


def _plusplus_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, list[float]]:
    n, k = len(x), len(centers)
    labels = None
    history: list[float] = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)  # ties -> lowest cluster id
        history.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        own = d2[np.arange(n), labels].copy()
        centers = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # empty cluster: re-seed at the point farthest from its own center
                far = int(own.argmax())
                centers[j] = x[far]
                own[far] = -1.0
    return labels, centers, history


def kmeans(vectors, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> ClusterModel:
    """k-means++ seeding, Lloyd to a fixpoint, best of ``n_init`` restarts by WCSS."""
    x = _as_matrix(vectors)
    n = len(x)
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= K < N, got K={k}, N={n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, centers, history = _lloyd(x, _plusplus_seed(x, k, rng), max_iter)
        wcss = float(((x - centers[labels]) ** 2).sum())
        if best is None or wcss < best[0]:
            best = (wcss, labels, centers, history)
    wcss, labels, centers, history = best
    return ClusterModel(k, labels, centers, wcss, tuple(history))


class MappingNetwork:
    """Seeded random network, frozen at construction, m -> total hidden neurons."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0, hidden: int = MAPPING_HIDDEN, gain: float = MAPPING_GAIN):
        self.in_dim, self.out_dim, self.seed, self.hidden, self.gain = in_dim, out_dim, seed, hidden, gain
        self.net: MlpParameters = init_mlp([in_dim, hidden, out_dim], seed, "relu", "linear", gain).freeze()

    def logits(self, center: np.ndarray) -> np.ndarray:
        out, _ = forward(self.net, np.asarray(center, dtype=np.float64))
        return out

    def probabilities(self, center: np.ndarray) -> np.ndarray:
        return expit(self.logits(center))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.net.to_bytes()).hexdigest()

    def redraw(self) -> "MappingNetwork":
        return MappingNetwork(self.in_dim, self.out_dim, self.seed + 1, self.hidden, self.gain)


def generate_mask(map_net: MappingNetwork, center: np.ndarray, lam: float, hidden_sizes: Sequence[int]) -> NeuronMask:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"drop threshold must lie in [0, 1), got {lam}")
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (map_net.in_dim,):
        raise ValueError(f"center has shape {center.shape}, mapping network expects ({map_net.in_dim},)")
    if sum(hidden_sizes) != map_net.out_dim:
        raise ValueError(f"mapping network emits {map_net.out_dim} probabilities, architecture has {sum(hidden_sizes)}")
    bits = (map_net.probabilities(center) > lam).astype(np.int8)
    layers = np.split(bits, np.cumsum(hidden_sizes)[:-1])
    for l, layer in enumerate(layers):
        if not layer.any():
            raise MaskConfigurationError(
                f"hidden layer {l} has no neuron above threshold {lam}; use a smaller lambda"
            )
    return NeuronMask(tuple(layers))


def standardize_centers(centers: np.ndarray) -> np.ndarray:
    """Shift centers to their centroid and scale to unit RMS norm (no-op scale if all equal)."""
    centers = np.asarray(centers, dtype=np.float64)
    shifted = centers - centers.mean(axis=0)
    rms = np.sqrt((shifted**2).sum(axis=1).mean())
    return shifted / rms if rms > 0 else shifted


@dataclass(frozen=True)
class MaskRegistry:
    masks: dict[int, NeuronMask]
    lam: float
    seed: int
    hidden_sizes: tuple[int, ...]
    mapping_sha256: str = ""

    def __getitem__(self, cluster: int) -> NeuronMask:
        return self.masks[cluster]

    def __len__(self) -> int:
        return len(self.masks)

    def dump(self, path: Union[str, Path]) -> None:
        lines = [
            "# maskshare mask registry",
            f"lambda={self.lam!r}",
            f"seed={self.seed}",
            "hidden=" + ",".join(str(h) for h in self.hidden_sizes),
            f"mapping_sha256={self.mapping_sha256}",
        ]
        lines += [f"{cid} {self.masks[cid].bitstring()}" for cid in sorted(self.masks)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MaskRegistry":
        header: dict[str, str] = {}
        rows: list[tuple[int, str]] = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                key, value = line.split("=", 1)
                header[key] = value
            else:
                cid, bits = line.split()
                rows.append((int(cid), bits))
        hidden = tuple(int(h) for h in header["hidden"].split(","))
        masks = {cid: NeuronMask.from_flat([int(c) for c in bits], hidden) for cid, bits in rows}
        return cls(masks, float(header["lambda"]), int(header["seed"]), hidden, header.get("mapping_sha256", ""))


def build_mask_registry(
    model: ClusterModel,
    map_net: MappingNetwork,
    lam: float = DEFAULT_LAMBDA,
    hidden_sizes: Sequence[int] = (64, 64),
    standardize: bool = True,
) -> tuple[MaskRegistry, MappingNetwork]:
    """One mask per cluster, computed once.

    If some cluster's mask would switch off an entire layer the mapping network
    is re-drawn with the next seed, at most ``MAX_REDRAWS`` times. Returns the
    registry and the mapping network that produced it.
    """
    inputs = standardize_centers(model.centers) if standardize else np.asarray(model.centers, dtype=np.float64)
    net = map_net
    for attempt in range(MAX_REDRAWS + 1):
        try:
            masks = {k: generate_mask(net, inputs[k], lam, hidden_sizes) for k in range(model.k)}
        except MaskConfigurationError:
            if attempt == MAX_REDRAWS:
                raise MaskConfigurationError(
                    f"no mapping seed in {map_net.seed}..{net.seed} leaves every layer active at "
                    f"lambda={lam}; use a smaller lambda"
                ) from None
            log.info("mapping seed %d empties a layer, redrawing", net.seed)
            net = net.redraw()
            continue
        return MaskRegistry(masks, lam, net.seed, tuple(hidden_sizes), net.fingerprint()), net
    raise AssertionError("unreachable")
