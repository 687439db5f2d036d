"""A small fully-connected ReLU classifier with exact input gradients.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``a = o @ W + b``; entry ``W[i, j]`` is the weight from incoming node ``i`` to
node ``j``.
"""
from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .poisonlab import Dataset

RELU = "relu"
IDENTITY = "identity"
_ACTIVATION_CODES = {IDENTITY: 0, RELU: 1}

PGNN_MAGIC = b"PGNN"
PGNN_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Layer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class Network:
    layers: list[Layer]
    # layer 1 sees (x - input_offset) * input_scale
    input_scale: float = 1.0
    input_offset: float = 0.0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.fan_out} -> {nxt.fan_in}"
                )
        for layer in self.layers:
            if layer.bias.shape != (layer.fan_out,):
                raise ValueError("bias length must equal layer width")
            if layer.activation not in _ACTIVATION_CODES:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def class_count(self) -> int:
        return self.layers[-1].fan_out

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainResult:
    network: Network
    loss_history: list[float] = field(default_factory=list)


def init_mlp(
    input_dim: int,
    hidden: tuple[int, ...] | list[int],
    class_count: int,
    seed: int = 0,
    input_scale: float = 1.0,
    input_offset: float = 0.0,
) -> Network:
    """He-initialized MLP: ReLU hidden layers, identity output layer."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, class_count]
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        w = rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
        act = IDENTITY if k == len(dims) - 2 else RELU
        layers.append(Layer(w, np.zeros(fan_out), act))
    return Network(layers, input_scale, input_offset)


def zero_network(input_dim: int, class_count: int) -> Network:
    return Network([Layer(np.zeros((input_dim, class_count)), np.zeros(class_count), IDENTITY)])


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ValueError(
            f"dimension mismatch: input has {x.shape[-1]} features, network expects {net.input_dim}"
        )
    return x


def _forward_cache(net: Network, x: np.ndarray):
    """Forward pass over a batch; returns (pre-activations, outputs) per layer."""
    pre, outs = [], [(x - net.input_offset) * net.input_scale]
    o = outs[0]
    for layer in net.layers:
        a = o @ layer.weights + layer.bias
        o = np.maximum(a, 0.0) if layer.activation == RELU else a
        pre.append(a)
        outs.append(o)
    return pre, outs


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits(net: Network, x) -> np.ndarray:
    x = _check_input(net, x)
    single = x.ndim == 1
    _, outs = _forward_cache(net, np.atleast_2d(x))
    return outs[-1][0] if single else outs[-1]


def forward(net: Network, x) -> np.ndarray:
    """Class probabilities for one sample or a batch."""
    return softmax(logits(net, x))


def predict(net: Network, x, batch_size: int = 4096) -> np.ndarray:
    x = np.atleast_2d(_check_input(net, x))
    out = np.empty(len(x), dtype=np.int64)
    for i in range(0, len(x), batch_size):
        out[i : i + batch_size] = np.argmax(logits(net, x[i : i + batch_size]), axis=1)
    return out


def _dlogits(z: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy loss and its gradient w.r.t. the logits.

    ``p_y - 1`` is formed as ``-sum_{k != y} p_k`` so confident predictions do
    not round the gradient to zero.
    """
    p = softmax(z)
    rows = np.arange(len(labels))
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = logsum - shifted[rows, labels]
    d = p.copy()
    d[rows, labels] = 0.0
    d[rows, labels] = -d.sum(axis=1)
    return loss, d


def _backward(net: Network, pre, outs, d: np.ndarray, want_params: bool):
    grads = [None] * len(net.layers)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation == RELU:
            d = d * (pre[k] > 0.0)
        if want_params:
            grads[k] = (outs[k].T @ d, d.sum(axis=0))
        d = d @ layer.weights.T
    return d * net.input_scale, grads


def _labels(labels, n: int, class_count: int) -> np.ndarray:
    y = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
    if np.any(y < 0) or np.any(y >= class_count):
        raise ValueError("label out of range")
    return y


def input_gradients(net: Network, x, labels) -> np.ndarray:
    """dE_y/dx for every row of `x`, with E_y the cross-entropy at label `y`.

    `labels` may be a scalar (same label for all rows) or one label per row.
    """
    x = np.atleast_2d(_check_input(net, x))
    y = _labels(labels, len(x), net.class_count)
    pre, outs = _forward_cache(net, x)
    _, d = _dlogits(outs[-1], y)
    dx, _ = _backward(net, pre, outs, d, want_params=False)
    return dx


def input_gradient(net: Network, x, y: int) -> np.ndarray:
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ValueError("input_gradient takes a single sample; use input_gradients for batches")
    return input_gradients(net, x[None, :], y)[0]


def loss(net: Network, x, labels) -> np.ndarray:
    x = np.atleast_2d(_check_input(net, x))
    y = _labels(labels, len(x), net.class_count)
    _, outs = _forward_cache(net, x)
    return _dlogits(outs[-1], y)[0]


def train(net: Network, data: "Dataset", cfg: TrainConfig) -> TrainResult:
    """Mini-batch SGD on a private copy of `net`."""
    x = np.asarray(data.images, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if np.any(y >= net.class_count) or np.any(y < 0):
        raise ValueError("dataset labels exceed network class count")
    _check_input(net, x)

    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    n = len(x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            pre, outs = _forward_cache(net, x[idx])
            batch_loss, d = _dlogits(outs[-1], y[idx])
            total += float(batch_loss.sum())
            _, grads = _backward(net, pre, outs, d / len(idx), want_params=True)
            for layer, (gw, gb) in zip(net.layers, grads):
                layer.weights -= cfg.learning_rate * gw
                layer.bias -= cfg.learning_rate * gb
        mean_loss = total / n
        if not math.isfinite(mean_loss):
            raise TrainingDivergedError(
                f"non-finite training loss at epoch {epoch + 1}; try a smaller learning rate"
            )
        history.append(mean_loss)
    return TrainResult(net, history)


def evaluate(net: Network, data: "Dataset") -> dict:
    """Accuracy summary.

    ``poisoned_accuracy`` compares flagged samples against their pre-poison
    labels and is ``None`` when nothing is flagged; ``poisoned_as_labeled``
    compares them against their current (possibly flipped) labels.
    """
    x = np.asarray(data.images, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    flags = np.asarray(data.poisoned_flags, dtype=bool)
    pred = predict(net, x) if len(x) else np.zeros(0, dtype=np.int64)
    correct = pred == y
    per_class = {}
    for c in range(data.class_count):
        sel = y == c
        per_class[c] = float(correct[sel].mean()) if sel.any() else None
    clean = ~flags
    out = {
        "accuracy": float(correct.mean()) if len(y) else None,
        "clean_accuracy": float(correct[clean].mean()) if clean.any() else None,
        "per_class_accuracy": per_class,
        "poisoned_accuracy": None,
        "poisoned_as_labeled": None,
        "poisoned_count": int(flags.sum()),
    }
    if flags.any():
        orig = np.asarray(data.original_labels, dtype=np.int64)
        out["poisoned_accuracy"] = float((pred[flags] == orig[flags]).mean())
        out["poisoned_as_labeled"] = float(correct[flags].mean())
    return out


# -- checkpoints -------------------------------------------------------------

def save_network(net: Network, path) -> None:
    """Write a PGNN checkpoint (little-endian).

    Layout: magic, u16 version, u32 layer count, f64 input scale, f64 input
    offset, then per layer
    u32 fan_in, u32 fan_out, u8 activation; then per layer the row-major f64
    weights followed by the f64 biases.
    """
    buf = bytearray(PGNN_MAGIC)
    buf += struct.pack("<HIdd", PGNN_VERSION, len(net.layers), net.input_scale, net.input_offset)
    for layer in net.layers:
        buf += struct.pack("<IIB", layer.fan_in, layer.fan_out, _ACTIVATION_CODES[layer.activation])
    for layer in net.layers:
        buf += np.ascontiguousarray(layer.weights, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_network(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:4] != PGNN_MAGIC:
        raise CheckpointError(f"{path}: not a PGNN checkpoint (bad magic)")
    head = struct.calcsize("<HIdd")
    if len(raw) < 4 + head:
        raise CheckpointError(f"{path}: truncated header")
    version, n_layers, scale, offset = struct.unpack_from("<HIdd", raw, 4)
    if version != PGNN_VERSION:
        raise CheckpointError(f"{path}: unsupported PGNN version {version}")
    off = 4 + head
    codes = {v: k for k, v in _ACTIVATION_CODES.items()}
    dims = []
    for _ in range(n_layers):
        if len(raw) < off + 9:
            raise CheckpointError(f"{path}: truncated layer table")
        fan_in, fan_out, code = struct.unpack_from("<IIB", raw, off)
        if code not in codes:
            raise CheckpointError(f"{path}: unknown activation code {code}")
        dims.append((fan_in, fan_out, codes[code]))
        off += 9
    expected = off + 8 * sum(i * o + o for i, o, _ in dims)
    if len(raw) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(raw)}")
    layers = []
    for fan_in, fan_out, act in dims:
        w = np.frombuffer(raw, "<f8", fan_in * fan_out, off).reshape(fan_in, fan_out).astype(np.float64)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(raw, "<f8", fan_out, off).astype(np.float64)
        off += 8 * fan_out
        layers.append(Layer(w, b, act))
    try:
        return Network(layers, scale, offset)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
