"""
Feed-forward rectifier network f_θ: forward pass, input Jacobians, training with
Adam on flattened noisy label sets, and evaluation metrics.

Layers use the row-vector convention h_l = relu(h_{l-1} W_l + b_l), with
W_l of shape (fan_in, fan_out).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from vbtta.errors import DegenerateInputError, DivergenceError, DomainError
from vbtta.mathstats import Rng
from vbtta.optim import AdamConfig, AdamState, adam_step

logger = logging.getLogger(__name__)

HEADS = ("linear", "scores")


@dataclass(eq=False)
class MlpModel:
    sizes: tuple
    weights: list
    biases: list
    head: str = "linear"

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.head not in HEADS:
            raise DomainError(f"unknown head '{self.head}'")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise DomainError(f"{len(self.sizes)} layer sizes need {len(self.sizes) - 1} weight/bias pairs")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.sizes[l], self.sizes[l + 1]) or b.shape != (self.sizes[l + 1],):
                raise DomainError(f"layer {l} has shapes {W.shape}, {b.shape}, expected "
                                  f"{(self.sizes[l], self.sizes[l + 1])}, {(self.sizes[l + 1],)}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise DomainError(f"layer {l} has non-finite parameters")

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def output_dim(self):
        return self.sizes[-1]

    def parameters(self):
        params = []
        for W, b in zip(self.weights, self.biases):
            params.extend([W, b])
        return params

    def copy(self):
        return MlpModel(self.sizes, [W.copy() for W in self.weights], [b.copy() for b in self.biases], self.head)

    def forward(self, x):
        return forward(self, x)

    def input_gradient(self, x):
        return input_gradient(self, x)


def init_mlp(sizes, rng, head="linear"):
    """He-initialized weights and zero biases"""
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise DomainError(f"invalid layer sizes {sizes}")
    gen = rng.generator
    weights = [gen.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
               for fan_in, fan_out in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(fan_out) for fan_out in sizes[1:]]
    return MlpModel(tuple(sizes), weights, biases, head)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DomainError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise DomainError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DomainError(f"batch size must be at least 1, got {self.batch_size}")

    def adam(self):
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.eps)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs with one label set per instance (scalars or class indices)"""
    inputs: np.ndarray
    labels: tuple
    task: str = "regression"
    n_classes: int = 0

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        labels = tuple(np.atleast_1d(np.asarray(s, dtype=int if self.task == "classification" else float))
                       for s in self.labels)
        if len(labels) != inputs.shape[0]:
            raise DomainError(f"{inputs.shape[0]} inputs but {len(labels)} label sets")
        if any(s.shape[0] < 1 for s in labels):
            raise DomainError("every instance needs at least one label")
        if self.task == "classification":
            if self.n_classes < 2:
                raise DomainError(f"classification needs at least 2 classes, got {self.n_classes}")
            if any(np.any((s < 0) | (s >= self.n_classes)) for s in labels):
                raise DomainError(f"class indices must lie in [0, {self.n_classes})")
        elif self.task != "regression":
            raise DomainError(f"unknown task '{self.task}'")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]

    def flatten(self):
        """One (x, y) row per label: returns (X, y)"""
        counts = np.array([s.shape[0] for s in self.labels])
        X = np.repeat(self.inputs, counts, axis=0)
        y = np.concatenate(self.labels)
        return X, y

    def first_labels(self):
        return np.array([s[0] for s in self.labels])

    def subset(self, idx):
        return Dataset(self.inputs[idx], tuple(self.labels[i] for i in idx), self.task, self.n_classes)


def _relu(a):
    return np.maximum(a, 0.0)


def _activations(model, X):
    """Pre-activations of every layer for a batch X"""
    pre = []
    h = X
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ W + b
        pre.append(a)
        h = _relu(a) if l < len(model.weights) - 1 else a
    return pre


def _as_batch(model, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DomainError(f"input of shape {x.shape} does not match model input dimension {model.input_dim}")
    return X, single


def forward(model, x):
    """Output vector for one input, or a batch of outputs for a 2-D array"""
    X, single = _as_batch(model, x)
    out = _activations(model, X)[-1]
    return out[0] if single else out


def input_gradient(model, x):
    """Jacobian ∂f/∂x of shape (out, d); a batch gives (n, out, d)"""
    X, single = _as_batch(model, x)
    pre = _activations(model, X)
    # Rectifier subgradient at 0 is 0
    J = np.broadcast_to(model.weights[0].T, (X.shape[0],) + model.weights[0].T.shape)
    for l in range(1, len(model.weights)):
        mask = (pre[l - 1] > 0).astype(float)
        J = np.einsum("ko,nk,nkd->nod", model.weights[l], mask, J)
    J = np.array(J)
    return J[0] if single else J


def softmax(scores):
    scores = np.asarray(scores, dtype=float)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_gradients(model, X, y):
    """
    Mean loss over the rows of X and its gradients, ordered as model.parameters().

    Linear head: squared error against scalar y. Scores head: cross-entropy of
    softmax scores against class indices y.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    pre = _activations(model, X)
    out = pre[-1]
    if model.head == "linear":
        resid = out - np.asarray(y, dtype=float).reshape(n, -1)
        loss = float(np.mean(np.sum(resid ** 2, axis=1)))
        delta = 2.0 * resid / n
    else:
        y = np.asarray(y, dtype=int)
        probs = softmax(out)
        picked = np.clip(probs[np.arange(n), y], 1e-300, None)
        loss = float(-np.mean(np.log(picked)))
        delta = probs.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n

    grads = [None] * (2 * len(model.weights))
    for l in range(len(model.weights) - 1, -1, -1):
        h_prev = X if l == 0 else _relu(pre[l - 1])
        grads[2 * l] = h_prev.T @ delta
        grads[2 * l + 1] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l].T) * (pre[l - 1] > 0)
    return loss, grads


def train(dataset, model_init, config, history=None):
    """
    Minibatch Adam on the flattened (x, y) pairs; returns a new trained model.

    history, when given, receives the mean training loss of every epoch.
    """
    if len(dataset) == 0:
        raise DegenerateInputError("cannot train on an empty dataset")
    X, y = dataset.flatten()
    model = model_init.copy()
    params = model.parameters()
    state = AdamState.zeros_like(params)
    adam = config.adam()
    rng = Rng(config.seed)
    n = X.shape[0]
    logger.info(f"Training {model.sizes} on {n} labelled pairs for {config.epochs} epochs")
    for epoch in range(config.epochs):
        order = rng.generator.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = loss_and_gradients(model, X[batch], y[batch])
            if not math.isfinite(loss):
                raise DivergenceError(f"training loss became {loss} in epoch {epoch + 1}", trace=history)
            adam_step(state, params, grads, adam)
            total += loss * batch.shape[0]
        epoch_loss = total / n
        if history is not None:
            history.append(epoch_loss)
        logger.debug(f"epoch {epoch + 1}: loss {epoch_loss:.6g}")
    logger.info(f"Training finished with loss {epoch_loss:.6g}")
    return model


def predict_labels(model, X):
    """Point predictions: the scalar output, or the arg-max class for a scores head"""
    out = forward(model, np.atleast_2d(X))
    if model.head == "scores":
        return np.argmax(out, axis=1)
    return out[:, 0]


def metrics(predictions, labels):
    predictions = np.asarray(predictions, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if predictions.shape != labels.shape:
        raise DomainError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if predictions.shape[0] == 0:
        raise DegenerateInputError("metrics need at least one prediction")
    diff = predictions - labels
    return {
        "mse": float(np.mean(diff ** 2)),
        "mae": float(np.mean(np.abs(diff))),
        "accuracy": float(np.mean(predictions == labels)),
    }
