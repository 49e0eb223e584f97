"""Fully-connected ReLU networks with hand-written backprop.

Layer inputs are captured on every forward pass because the subspace memory
is built from them. Weights are stored ``(out_dim, in_dim)`` so a layer maps a
row batch ``x`` to ``x @ w.T + b``.

Two output modes are supported:

* multi-head: ``Network.layers`` is the shared body and every task owns a
  head in ``Network.heads``;
* single-head: the last entry of ``Network.layers`` is the shared classifier
  and ``Network.heads`` is empty.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")
LOSSES = ("cross_entropy", "mse")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError("bias length must equal weight rows")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, activation="relu"):
        a = math.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-a, a, size=(out_dim, in_dim)), np.zeros(out_dim), activation)


@dataclass
class Network:
    layers: list[Layer]
    heads: dict[int, Layer] = field(default_factory=dict)
    multi_head: bool = True

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_dim != prev.out_dim:
                raise ValueError("consecutive layer dimensions do not chain")
        if not self.multi_head and self.layers[-1].activation != "identity":
            raise ValueError("the shared head must use the identity activation")

    @classmethod
    def build(cls, dims: Sequence[int], rng: np.random.Generator, multi_head=True, n_out: int | None = None):
        """``dims`` lists input then hidden widths, e.g. ``(32, 100, 100)``.

        In single-head mode ``n_out`` sizes the shared classifier.
        """
        layers = [Layer.init(i, o, rng) for i, o in zip(dims[:-1], dims[1:])]
        if not multi_head:
            if n_out is None:
                raise ValueError("single-head networks need n_out")
            layers.append(Layer.init(dims[-1], n_out, rng, activation="identity"))
        return cls(layers, {}, multi_head)

    @property
    def n_projected(self) -> int:
        """Number of layers handled by the subspace machinery (heads excluded)."""
        return len(self.layers)

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_dim

    def add_head(self, task: int, n_out: int, rng: np.random.Generator) -> Layer:
        if not self.multi_head:
            raise ValueError("single-head network has no per-task heads")
        head = Layer.init(self.feature_dim, n_out, rng, activation="identity")
        self.heads[task] = head
        return head

    def head_for(self, task) -> Optional[Layer]:
        """The head for ``task``; ``None`` for a shared head or, with ``task=None``, the body alone."""
        if not self.multi_head or task is None:
            return None
        if task not in self.heads:
            raise KeyError(f"no head for task {task!r}")
        return self.heads[task]

    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def copy(self) -> "Network":
        return copy.deepcopy(self)


@dataclass
class ForwardTrace:
    """Per-layer inputs and pre-activations of one batch.

    ``inputs[l]`` is the input to layer ``l``; with a task head the last entry
    is the head's input. ``weights`` are the matrices actually used, which may
    differ from the stored ones when effective weights are supplied.
    """

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    weights: list[np.ndarray]
    logits: np.ndarray
    task: object = None

    @property
    def n_layers(self) -> int:
        return len(self.inputs)


@dataclass
class LayerGradients:
    """Gradients for the projected layers plus, in multi-head mode, the head."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head_weight: Optional[np.ndarray] = None
    head_bias: Optional[np.ndarray] = None

    def scaled(self, c: float) -> "LayerGradients":
        return LayerGradients(
            [c * g for g in self.weights],
            [c * g for g in self.biases],
            None if self.head_weight is None else c * self.head_weight,
            None if self.head_bias is None else c * self.head_bias,
        )

    def add_(self, other: "LayerGradients") -> "LayerGradients":
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        if self.head_weight is not None and other.head_weight is not None:
            self.head_weight += other.head_weight
            self.head_bias += other.head_bias
        return self

    def copy(self) -> "LayerGradients":
        return self.scaled(1.0)


def forward(net: Network, batch, task=None, weights: Optional[Sequence[np.ndarray]] = None) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.layers[0].in_dim:
        raise ValueError(f"batch shape {x.shape} does not fit input dim {net.layers[0].in_dim}")
    ws = list(weights) if weights is not None else net.weights()
    inputs, preacts = [], []
    for layer, w in zip(net.layers, ws):
        inputs.append(x)
        z = x @ w.T + layer.bias
        preacts.append(z)
        x = np.maximum(z, 0.0) if layer.activation == "relu" else z
    head = net.head_for(task)
    if head is not None:
        inputs.append(x)
        z = x @ head.weight.T + head.bias
        preacts.append(z)
        x = z
    return ForwardTrace(inputs, preacts, ws, x, task)


def _check_labels(labels, batch_size: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (batch_size,):
        raise ValueError(f"expected {batch_size} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels out of range [0, {n_classes})")
    return y.astype(np.intp)


def loss_and_logit_grad(logits: np.ndarray, labels, loss: str = "cross_entropy") -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient with respect to the logits."""
    n, c = logits.shape
    y = _check_labels(labels, n, c)
    if loss == "cross_entropy":
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        value = float(np.mean(lse - z[np.arange(n), y]))
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        return value, p / n
    if loss == "mse":
        target = np.zeros_like(logits)
        target[np.arange(n), y] = 1.0
        diff = logits - target
        return float(np.sum(diff * diff) / n), 2.0 * diff / n
    raise ValueError(f"unknown loss {loss!r}")


def backward(net: Network, trace: ForwardTrace, labels, loss: str = "cross_entropy") -> tuple[float, LayerGradients]:
    """Mean loss and exact gradients with respect to the weights used in ``trace``."""
    value, delta = loss_and_logit_grad(trace.logits, labels, loss)
    head = net.head_for(trace.task)
    head_w = head_b = None
    if head is not None:
        h = trace.inputs[-1]
        head_w = delta.T @ h
        head_b = delta.sum(axis=0)
        delta = delta @ head.weight
    gw: list[np.ndarray] = [None] * len(net.layers)
    gb: list[np.ndarray] = [None] * len(net.layers)
    for l in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[l]
        if layer.activation == "relu":
            delta = delta * (trace.preacts[l] > 0)
        gw[l] = delta.T @ trace.inputs[l]
        gb[l] = delta.sum(axis=0)
        if l:
            delta = delta @ trace.weights[l]
    return value, LayerGradients(gw, gb, head_w, head_b)


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


GradTransform = Callable[[LayerGradients, ForwardTrace], LayerGradients]


def apply_step(net: Network, grads: LayerGradients, lr: float, task=None) -> None:
    for layer, gw, gb in zip(net.layers, grads.weights, grads.biases):
        layer.weight -= lr * gw
        layer.bias -= lr * gb
    if grads.head_weight is None:
        return
    head = net.head_for(task)
    if head is not None:
        head.weight -= lr * grads.head_weight
        head.bias -= lr * grads.head_bias


def sgd_epoch(
    net: Network,
    x,
    y,
    lr: float,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    task=None,
    loss: str = "cross_entropy",
    grad_transform: Optional[GradTransform] = None,
    weights_fn: Optional[Callable[[], Sequence[np.ndarray]]] = None,
) -> float:
    """One pass of minibatch SGD; returns the sample-weighted mean loss.

    ``grad_transform`` sees every batch gradient before the step and returns
    the gradient to apply. ``weights_fn`` supplies the weights used in the
    forward pass when they differ from the stored ones.
    """
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty dataset")
    total = 0.0
    for idx in _batches(len(x), batch_size, rng):
        ws = weights_fn() if weights_fn is not None else None
        trace = forward(net, x[idx], task, ws)
        value, grads = backward(net, trace, y[idx], loss)
        if grad_transform is not None:
            grads = grad_transform(grads, trace)
        apply_step(net, grads, lr, task)
        total += value * len(idx)
    return total / len(x)


def dataset_loss(net: Network, x, y, task=None, loss="cross_entropy", weights=None, batch_size=1024) -> float:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    total = 0.0
    for start in range(0, len(x), batch_size):
        tr = forward(net, x[start:start + batch_size], task, weights)
        value, _ = loss_and_logit_grad(tr.logits, np.asarray(y)[start:start + batch_size], loss)
        total += value * len(tr.logits)
    return total / len(x)


def mean_gradient(net: Network, x, y, task=None, loss="cross_entropy", weights=None, batch_size=1024) -> LayerGradients:
    """Gradient of the mean loss over the whole dataset."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty dataset")
    acc = None
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        tr = forward(net, x[sl], task, weights)
        _, g = backward(net, tr, y[sl], loss)
        g = g.scaled(len(tr.logits) / len(x))
        acc = g if acc is None else acc.add_(g)
    return acc


def evaluate(net: Network, x, y, task=None, weights=None) -> float:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    logits = forward(net, x, task, weights).logits
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


@dataclass
class Schedule:
    init_lr: float = 0.01
    min_lr: float = 1e-5
    decay: float = 2.0
    patience: int = 6
    max_epochs: int = 200


@dataclass
class TrainStats:
    epochs: int = 0
    train_losses: list[float] = field(default_factory=list)
    valid_losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    stopped_early: bool = False


def early_stopping_loop(run_epoch: Callable[[float], float], valid_loss: Callable[[], float], schedule: Schedule) -> TrainStats:
    """Counter-based lr decay.

    The counter grows whenever the validation loss rises above the previous
    epoch's; once it exceeds ``patience`` the lr is divided by ``decay`` and
    the counter resets. Training stops when the lr drops below ``min_lr``.
    """
    stats = TrainStats()
    lr = schedule.init_lr
    counter = 0
    prev = math.inf
    for _ in range(schedule.max_epochs):
        stats.lrs.append(lr)
        stats.train_losses.append(run_epoch(lr))
        stats.epochs += 1
        v = valid_loss()
        stats.valid_losses.append(v)
        if v > prev:
            counter += 1
        prev = v
        if counter > schedule.patience:
            lr /= schedule.decay
            counter = 0
            if lr < schedule.min_lr:
                stats.stopped_early = True
                break
    return stats


def validation_split(n: int, rng: np.random.Generator, fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_valid = max(1, int(round(fraction * n)))
    return order[n_valid:], order[:n_valid]


def train_with_early_stop(
    net: Network,
    train: tuple,
    valid: Optional[tuple],
    schedule: Schedule,
    batch_size: int,
    rng: np.random.Generator,
    task=None,
    loss: str = "cross_entropy",
    grad_transform: Optional[GradTransform] = None,
    weights_fn=None,
    on_epoch: Optional[Callable[[int], None]] = None,
) -> TrainStats:
    x, y = (np.asarray(a) for a in train)
    if valid is None:
        tr_idx, va_idx = validation_split(len(x), rng)
        x, y, valid = x[tr_idx], y[tr_idx], (x[va_idx], y[va_idx])
    vx, vy = valid
    if len(vx) == 0:
        raise ValueError("empty validation set")
    epoch = [0]

    def run_epoch(lr):
        value = sgd_epoch(net, x, y, lr, batch_size, rng, task, loss, grad_transform, weights_fn)
        if on_epoch is not None:
            on_epoch(epoch[0])
        epoch[0] += 1
        return value

    def vloss():
        ws = weights_fn() if weights_fn is not None else None
        return dataset_loss(net, vx, vy, task, loss, ws)

    return early_stopping_loop(run_epoch, vloss, schedule)
