"""Small feed-forward network engine with exact gradients and neuron masks.

Weights are stored ``(out, in)`` per layer. All arithmetic is float64.

A :class:`NeuronMask` zeroes hidden activations *after* the nonlinearity,
which is the same as zeroing the neuron's incoming row, its bias and its
outgoing column. Forward passes accept either a single input vector or a
batch ``(B, in)``; a batch may carry one mask row per sample so that agents
bound to different subnetworks of one shared net can be evaluated together.

RMSProp follows the accumulator recurrence::

    v <- decay * v + (1 - decay) * g**2
    theta <- theta - lr * g / sqrt(v + eps)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, NumericError

ACTIVATIONS = ("relu", "tanh")
HEADS = ("softmax", "linear")

CHECKPOINT_MAGIC = b"MSL1"


@dataclass(eq=False)
class MlpParameters:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_head: str = "linear"
    # bumped on every in-place update; traces record it to catch staleness
    version: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise DimensionError("weights/biases do not match layer_sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if w.shape != shape or b.shape != (shape[0],):
                raise DimensionError(f"layer {l}: expected W{shape}, got W{w.shape}, b{b.shape}")

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return self.layer_sizes[1:-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParameters":
        return MlpParameters(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_head,
        )

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MlpParameters):
            return NotImplemented
        return (
            self.layer_sizes == other.layer_sizes
            and self.hidden_activation == other.hidden_activation
            and self.output_head == other.output_head
            and all(np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases))
        )

    def freeze(self) -> "MlpParameters":
        """Make all arrays read-only; any later in-place update raises."""
        for a in (*self.weights, *self.biases):
            a.setflags(write=False)
        return self


def init_mlp(
    layer_sizes: Sequence[int],
    seed: Union[int, np.random.Generator] = 0,
    hidden_activation: str = "relu",
    output_head: str = "linear",
    gain: float = 1.0,
) -> MlpParameters:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 3:
        raise DimensionError("a network needs at least one hidden layer")
    if any(s < 1 for s in sizes):
        raise DimensionError("layer sizes must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParameters(tuple(sizes), weights, biases, hidden_activation, output_head)


def param_count(net_or_sizes: Union[MlpParameters, Sequence[int]]) -> int:
    sizes = net_or_sizes.layer_sizes if isinstance(net_or_sizes, MlpParameters) else net_or_sizes
    return int(sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:])))


@dataclass(frozen=True)
class NeuronMask:
    """Binary activation vector per hidden layer (1 keeps the neuron)."""

    layers: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        layers = []
        for l, v in enumerate(self.layers):
            v = np.asarray(v)
            if v.ndim != 1 or not np.isin(v, (0, 1)).all():
                raise DimensionError(f"mask layer {l} must be a 0/1 vector")
            if not v.any():
                raise DimensionError(f"mask layer {l} has no active neuron")
            v = v.astype(np.float64)
            v.setflags(write=False)
            layers.append(v)
        object.__setattr__(self, "layers", tuple(layers))

    @classmethod
    def ones(cls, hidden_sizes: Sequence[int]) -> "NeuronMask":
        return cls(tuple(np.ones(h) for h in hidden_sizes))

    @classmethod
    def from_flat(cls, bits: Sequence[int], hidden_sizes: Sequence[int]) -> "NeuronMask":
        bits = np.asarray(bits)
        if bits.size != sum(hidden_sizes):
            raise DimensionError(f"{bits.size} mask bits for hidden sizes {tuple(hidden_sizes)}")
        return cls(tuple(np.split(bits, np.cumsum(hidden_sizes)[:-1])))

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.layers).astype(np.int8)

    def bitstring(self) -> str:
        return "".join(str(int(b)) for b in self.flat())

    def active_fraction(self) -> float:
        return float(self.flat().mean())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NeuronMask):
            return NotImplemented
        return self.hidden_sizes == other.hidden_sizes and all(
            np.array_equal(a, b) for a, b in zip(self.layers, other.layers)
        )

    def __hash__(self) -> int:
        return hash(self.bitstring())


MaskLike = Union[NeuronMask, Sequence[np.ndarray], None]


@dataclass
class Trace:
    """Everything backward needs from a forward pass."""

    net_id: int
    net_version: int
    inputs: list[np.ndarray]  # input to each layer, post-mask, (B, in)
    pre: list[np.ndarray]  # pre-activation of each layer, (B, out)
    masks: list[np.ndarray | None]
    output: np.ndarray
    squeeze: bool

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]


def _mask_layers(net: MlpParameters, mask: MaskLike, batch: int) -> list[np.ndarray | None]:
    hidden = net.hidden_sizes
    if mask is None:
        return [None] * len(hidden)
    layers = mask.layers if isinstance(mask, NeuronMask) else list(mask)
    if len(layers) != len(hidden):
        raise DimensionError(f"mask has {len(layers)} layers, network has {len(hidden)} hidden layers")
    out = []
    for l, (m, h) in enumerate(zip(layers, hidden)):
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((h,), (batch, h)):
            raise DimensionError(f"mask layer {l} shape {m.shape} incompatible with width {h}, batch {batch}")
        out.append(m)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(net: MlpParameters, x: np.ndarray, mask: MaskLike = None) -> tuple[np.ndarray, Trace]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.layer_sizes[0]:
        raise DimensionError(f"input shape {x.shape} does not match input width {net.layer_sizes[0]}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite network input")
    masks = _mask_layers(net, mask, x.shape[0])

    act = np.maximum if net.hidden_activation == "relu" else None
    inputs, pres = [], []
    a = x
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ w.T + b
        pres.append(z)
        if l < last:
            a = act(z, 0.0) if act is not None else np.tanh(z)
            if masks[l] is not None:
                a = a * masks[l]
    logits = pres[-1]
    out = softmax(logits) if net.output_head == "softmax" else logits
    trace = Trace(id(net), net.version, inputs, pres, masks, out, squeeze)
    return (out[0] if squeeze else out), trace


@dataclass
class GradientBuffer:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: MlpParameters) -> "GradientBuffer":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    def scale(self, factor: float) -> "GradientBuffer":
        return GradientBuffer([w * factor for w in self.weights], [b * factor for b in self.biases])

    def __add__(self, other: "GradientBuffer") -> "GradientBuffer":
        return GradientBuffer(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


def backward(
    net: MlpParameters,
    trace: Trace,
    upstream: np.ndarray,
    mask: MaskLike = None,
    *,
    wrt: str = "output",
    input_grad: bool = False,
):
    """Reverse-mode gradients of a scalar loss given dLoss/d(output).

    ``wrt="logits"`` treats ``upstream`` as the gradient with respect to the
    final pre-activation, skipping the softmax Jacobian. ``mask`` is optional;
    when given it must be the mask the trace was recorded with. With
    ``input_grad=True`` returns ``(grads, dLoss/d(input))``.
    """
    if trace.net_id != id(net) or trace.net_version != net.version:
        raise ContractError("trace was produced by a different or since-updated network")
    if mask is not None:
        given = _mask_layers(net, mask, trace.inputs[0].shape[0])
        for g, m in zip(given, trace.masks):
            if m is None or g.shape != m.shape or not np.array_equal(g, m):
                raise ContractError("mask differs from the one used in forward")
    g = np.asarray(upstream, dtype=np.float64)
    if trace.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.pre[-1].shape:
        raise DimensionError(f"upstream gradient shape {g.shape} != output shape {trace.pre[-1].shape}")

    if wrt == "output" and net.output_head == "softmax":
        p = trace.output if trace.output.ndim == 2 else trace.output[None, :]
        delta = p * (g - np.sum(g * p, axis=1, keepdims=True))
    elif wrt in ("output", "logits"):
        delta = g
    else:
        raise ValueError(f"wrt must be 'output' or 'logits', got {wrt!r}")

    gw: list[np.ndarray] = [None] * net.n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * net.n_layers  # type: ignore[list-item]
    for l in range(net.n_layers - 1, -1, -1):
        gw[l] = delta.T @ trace.inputs[l]
        gb[l] = delta.sum(axis=0)
        da = delta @ net.weights[l] if (l > 0 or input_grad) else None
        if l == 0:
            break
        if trace.masks[l - 1] is not None:
            da = da * trace.masks[l - 1]
        z = trace.pre[l - 1]
        if net.hidden_activation == "relu":
            delta = da * (z > 0)
        else:
            delta = da * (1.0 - np.tanh(z) ** 2)
    grads = GradientBuffer(gw, gb)
    if input_grad:
        return grads, (da[0] if trace.squeeze else da)
    return grads


def _check_finite(grads: GradientBuffer) -> None:
    for l, (w, b) in enumerate(zip(grads.weights, grads.biases)):
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NumericError(f"non-finite gradient in layer {l}")


def _check_shapes(net: MlpParameters, grads: GradientBuffer) -> None:
    for l, (w, gw, b, gb) in enumerate(zip(net.weights, grads.weights, net.biases, grads.biases)):
        if w.shape != gw.shape or b.shape != gb.shape:
            raise DimensionError(f"gradient shape mismatch in layer {l}")


def sgd_step(net: MlpParameters, grads: GradientBuffer, lr: float) -> MlpParameters:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    _check_shapes(net, grads)
    _check_finite(grads)
    for p, g in zip(net.weights + net.biases, grads.weights + grads.biases):
        p -= lr * g
    net.version += 1
    return net


@dataclass
class RmsPropState:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: MlpParameters) -> "RmsPropState":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])


def rmsprop_step(
    net: MlpParameters,
    grads: GradientBuffer,
    state: RmsPropState,
    lr: float,
    decay: float = 0.99,
    eps: float = 1e-5,
) -> tuple[MlpParameters, RmsPropState]:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    _check_shapes(net, grads)
    _check_finite(grads)
    params = net.weights + net.biases
    accs = state.weights + state.biases
    for p, g, v in zip(params, grads.weights + grads.biases, accs):
        v *= decay
        v += (1.0 - decay) * g * g
        p -= lr * g / np.sqrt(v + eps)
    net.version += 1
    return net, state


def clip_by_global_norm(grads: Sequence[GradientBuffer], max_norm: float) -> tuple[list[GradientBuffer], float]:
    """Jointly rescale several buffers so their combined L2 norm is <= max_norm."""
    total = float(np.sqrt(sum(g.global_norm() ** 2 for g in grads)))
    if not np.isfinite(total):
        raise NumericError("non-finite gradient norm")
    if total <= max_norm or total == 0.0:
        return list(grads), total
    return [g.scale(max_norm / total) for g in grads], total


# Checkpoint layout (little-endian):
#   b"MSL1" | u32 n_sizes | u32 size * n_sizes | u8 activation | u8 head
#   then per layer: weights (out*in f64, row-major), biases (out f64)
def checkpoint_bytes(net: MlpParameters) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", len(net.layer_sizes)),
        struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes),
        struct.pack("<BB", ACTIVATIONS.index(net.hidden_activation), HEADS.index(net.output_head)),
    ]
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(net: MlpParameters, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def checkpoint_from_bytes(data: bytes) -> MlpParameters:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an MSL1 checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    sizes = struct.unpack_from(f"<{n}I", data, 8)
    off = 8 + 4 * n
    act, head = struct.unpack_from("<BB", data, off)
    off += 2
    weights, biases = [], []
    for i, o in zip(sizes[:-1], sizes[1:]):
        weights.append(np.frombuffer(data, dtype="<f8", count=o * i, offset=off).reshape(o, i).astype(np.float64))
        off += 8 * o * i
        biases.append(np.frombuffer(data, dtype="<f8", count=o, offset=off).astype(np.float64))
        off += 8 * o
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return MlpParameters(tuple(sizes), weights, biases, ACTIVATIONS[act], HEADS[head])


def load_checkpoint(path: Union[str, Path]) -> MlpParameters:
    return checkpoint_from_bytes(Path(path).read_bytes())
