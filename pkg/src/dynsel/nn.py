"""Minimal fully connected network trainer that records prediction traces.

Everything is plain numpy and deterministic: weights come from a generator
seeded with [seed, 0], the epoch-e shuffle from [seed, 1 + e]. Two runs with
the same config and data produce bit-identical traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .datasets import Dataset
from .trace import PredictionTrace

ACTIVATIONS = ("relu", "tanh")
OPTIMIZERS = ("sgd", "momentum", "adam")

__all__ = [
    "ACTIVATIONS",
    "OPTIMIZERS",
    "Model",
    "TrainConfig",
    "Gradients",
    "TrainingDivergedError",
    "init_model",
    "predict",
    "predict_batch",
    "loss_and_gradient",
    "train",
    "expected_checkpoint_count",
]


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"non-finite loss {loss!r} at optimizer step {step}")
        self.step = step
        self.loss = loss


@dataclass
class Model:
    """Per-layer weight matrices (fan_in, fan_out), bias vectors, activation tag."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    def copy(self) -> "Model":
        return Model(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
        )


class Gradients(NamedTuple):
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training run.

    ``checkpoint_every`` counts mini-batches between recorded checkpoints.
    ``lr_milestones``/``lr_decay`` are schedule hooks; the default is a
    constant learning rate. ``eval_split`` is a free-text provenance note
    describing which examples form the trace's evaluation set.
    """

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    checkpoint_every: int = 50
    seed: int = 0
    record_probabilities: bool = True
    eval_split: str = ""
    lr_milestones: tuple[int, ...] = field(default_factory=tuple)
    lr_decay: float = 1.0

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output widths")
        if any(int(s) < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be at least 1")
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))


def init_model(layer_sizes, activation: str, rng: np.random.Generator) -> Model:
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out)), biases at zero."""
    sizes = [int(s) for s in layer_sizes]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Model(weights=weights, biases=biases, activation=activation)


def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _activate_grad(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (pre > 0.0).astype(pre.dtype)
    return 1.0 - np.tanh(pre) ** 2


def _forward(model: Model, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Returns (logits, pre-activations per hidden layer, post-activations incl. input)."""
    h = x
    pres: list[np.ndarray] = []
    posts: list[np.ndarray] = [x]
    n_layers = len(model.weights)
    for layer in range(n_layers - 1):
        pre = h @ model.weights[layer] + model.biases[layer]
        h = _activate(pre, model.activation)
        pres.append(pre)
        posts.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    return logits, pres, posts


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def predict_batch(model: Model, x: np.ndarray) -> np.ndarray:
    """(B, C) class probabilities via max-subtracted softmax."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.weights[0].shape[0]:
        raise ValueError(
            f"expected inputs of dimension {model.weights[0].shape[0]}, got shape {x.shape}"
        )
    logits, _, _ = _forward(model, x)
    return _softmax(logits)


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Class probabilities for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a single feature vector, got shape {x.shape}")
    return predict_batch(model, x[np.newaxis, :])[0]


def loss_and_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[float, Gradients]:
    """Mean cross-entropy over the batch and its gradient w.r.t. all parameters.

    The loss is computed through log-sum-exp, so huge logits neither overflow
    nor produce log(0).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a nonempty (B, d) array")
    if y.shape != (x.shape[0],):
        raise ValueError("batch targets must be one label per example")

    logits, pres, posts = _forward(model, x)
    batch = x.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(batch), y]))

    probs = _softmax(logits)
    delta = probs
    delta[np.arange(batch), y] -= 1.0
    delta /= batch

    grad_w: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(model.biases)
    for layer in range(len(model.weights) - 1, -1, -1):
        grad_w[layer] = posts[layer].T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ model.weights[layer].T) * _activate_grad(pres[layer - 1], model.activation)
    return loss, Gradients(weights=grad_w, biases=grad_b)


class _Optimizer:
    def __init__(self, config: TrainConfig) -> None:
        self.lr = config.learning_rate
        self.weight_decay = config.weight_decay

    def scale_lr(self, factor: float) -> None:
        self.lr *= factor

    def step(self, model: Model, grads: Gradients) -> None:
        raise NotImplementedError


class _Sgd(_Optimizer):
    def step(self, model: Model, grads: Gradients) -> None:
        for w, b, gw, gb in zip(model.weights, model.biases, grads.weights, grads.biases):
            w -= self.lr * (gw + self.weight_decay * w)
            b -= self.lr * gb


class _Momentum(_Optimizer):
    def __init__(self, config: TrainConfig) -> None:
        super().__init__(config)
        self.mu = config.momentum
        self.vel_w: list[np.ndarray] | None = None
        self.vel_b: list[np.ndarray] | None = None

    def step(self, model: Model, grads: Gradients) -> None:
        if self.vel_w is None:
            self.vel_w = [np.zeros_like(w) for w in model.weights]
            self.vel_b = [np.zeros_like(b) for b in model.biases]
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            gw = grads.weights[i] + self.weight_decay * w
            self.vel_w[i] = self.mu * self.vel_w[i] + gw
            self.vel_b[i] = self.mu * self.vel_b[i] + grads.biases[i]
            w -= self.lr * self.vel_w[i]
            b -= self.lr * self.vel_b[i]


class _Adam(_Optimizer):
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, config: TrainConfig) -> None:
        super().__init__(config)
        self.t = 0
        self.m_w: list[np.ndarray] | None = None

    def step(self, model: Model, grads: Gradients) -> None:
        if self.m_w is None:
            self.m_w = [np.zeros_like(w) for w in model.weights]
            self.v_w = [np.zeros_like(w) for w in model.weights]
            self.m_b = [np.zeros_like(b) for b in model.biases]
            self.v_b = [np.zeros_like(b) for b in model.biases]
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            gw = grads.weights[i] + self.weight_decay * w
            gb = grads.biases[i]
            self.m_w[i] = self.beta1 * self.m_w[i] + (1 - self.beta1) * gw
            self.v_w[i] = self.beta2 * self.v_w[i] + (1 - self.beta2) * gw**2
            self.m_b[i] = self.beta1 * self.m_b[i] + (1 - self.beta1) * gb
            self.v_b[i] = self.beta2 * self.v_b[i] + (1 - self.beta2) * gb**2
            w -= self.lr * (self.m_w[i] / correct1) / (np.sqrt(self.v_w[i] / correct2) + self.eps)
            b -= self.lr * (self.m_b[i] / correct1) / (np.sqrt(self.v_b[i] / correct2) + self.eps)


def _make_optimizer(config: TrainConfig) -> _Optimizer:
    if config.optimizer == "sgd":
        return _Sgd(config)
    if config.optimizer == "momentum":
        return _Momentum(config)
    return _Adam(config)


def expected_checkpoint_count(config: TrainConfig, n_train: int) -> int:
    """Closed-form checkpoint count for a run: one per cadence hit, plus a
    final checkpoint unless the last step lands on the cadence."""
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    total = config.epochs * steps_per_epoch
    count = total // config.checkpoint_every
    if total % config.checkpoint_every != 0 or count == 0:
        count += 1
    return count


def _eval_checkpoint(model: Model, eval_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs64 = predict_batch(model, eval_x)
    probs32 = probs64.astype(np.float32)
    # argmax on the stored float32 values, so the trace's label/probability
    # consistency invariant cannot be broken by the cast
    labels = probs32.argmax(axis=1).astype(np.uint16)
    return labels, probs32


def train(config: TrainConfig, train_set: Dataset, eval_set: Dataset) -> tuple[PredictionTrace, Model]:
    """Train from scratch, evaluating the eval set every ``checkpoint_every``
    mini-batches. Returns the recorded trace (carrying the eval set's true
    labels) and the final model.
    """
    if eval_set.n_examples == 0:
        raise ValueError("eval set must be nonempty")
    if train_set.n_features != eval_set.n_features:
        raise ValueError("train and eval sets disagree on feature dimension")
    if train_set.n_classes != eval_set.n_classes:
        raise ValueError("train and eval sets disagree on class count")
    if config.layer_sizes[0] != train_set.n_features:
        raise ValueError(
            f"layer_sizes starts at {config.layer_sizes[0]} but data has "
            f"{train_set.n_features} features"
        )
    if config.layer_sizes[-1] != train_set.n_classes:
        raise ValueError(
            f"layer_sizes ends at {config.layer_sizes[-1]} but data has "
            f"{train_set.n_classes} classes"
        )

    model = init_model(config.layer_sizes, config.activation, np.random.default_rng([config.seed, 0]))
    optimizer = _make_optimizer(config)
    train_x = train_set.features.astype(np.float64)
    train_y = train_set.targets
    eval_x = eval_set.features.astype(np.float64)

    checkpoint_labels: list[np.ndarray] = []
    checkpoint_probs: list[np.ndarray] = []
    checkpoint_steps: list[int] = []

    def record(step: int) -> None:
        labels, probs = _eval_checkpoint(model, eval_x)
        checkpoint_labels.append(labels)
        if config.record_probabilities:
            checkpoint_probs.append(probs)
        checkpoint_steps.append(step)

    n = train_set.n_examples
    step = 0
    for epoch in range(config.epochs):
        if epoch in config.lr_milestones:
            optimizer.scale_lr(config.lr_decay)
        perm = np.random.default_rng([config.seed, 1 + epoch]).permutation(n)
        for start in range(0, n, config.batch_size):
            batch_idx = perm[start : start + config.batch_size]
            loss, grads = loss_and_gradient(model, train_x[batch_idx], train_y[batch_idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(step=step + 1, loss=loss)
            optimizer.step(model, grads)
            step += 1
            if step % config.checkpoint_every == 0:
                record(step)
    # no duplicate when the last step landed on the cadence; the trace must
    # still end with the final model even if no cadence checkpoint fired
    if not checkpoint_steps or checkpoint_steps[-1] != step:
        record(step)

    trace = PredictionTrace(
        labels=np.stack(checkpoint_labels),
        checkpoint_steps=np.asarray(checkpoint_steps, dtype=np.int64),
        n_classes=train_set.n_classes,
        probabilities=np.stack(checkpoint_probs) if config.record_probabilities else None,
        true_labels=eval_set.targets.astype(np.uint16),
        seed=config.seed,
    )
    return trace, model
