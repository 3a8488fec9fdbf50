"""Dense feedforward classifiers with explicit forward and backward passes.

Everything is float64 numpy. Posteriors use a max-subtracted softmax.
Models are immutable after construction; train() returns a new instance,
so read-only evaluation and gradient queries are safe to share.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import LabeledDataset
from .errors import InputError

RELU = "relu"
LINEAR = "linear"
_ACTIVATIONS = (RELU, LINEAR)

PLAIN_GRADIENT = "plain-gradient"
ADAPTIVE_MOMENT = "adaptive-moment"


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str

    def __post_init__(self):
        weight = np.array(self.weight, dtype=np.float64, order="C")
        bias = np.array(self.bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise InputError("layer weight must be (out, in) with a matching bias")
        if self.activation not in _ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        weight.flags.writeable = False
        bias.flags.writeable = False
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class DenseClassifier:
    """Fully-connected classifier: ReLU hidden layers, linear output, softmax posterior."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InputError("a classifier needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.in_dim != prev.out_dim:
                raise InputError("layer dimensions do not chain")
        if layers[-1].activation != LINEAR:
            raise InputError("output layer must be linear (softmax is applied on top)")
        object.__setattr__(self, "layers", layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    optimizer: str = ADAPTIVE_MOMENT

    def __post_init__(self):
        if self.epochs < 0:
            raise InputError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be positive")
        if self.batch_size < 1:
            raise InputError("batch_size must be at least 1")
        if self.optimizer not in (PLAIN_GRADIENT, ADAPTIVE_MOMENT):
            raise InputError(f"unknown optimizer {self.optimizer!r}")


def init_model(num_classes: int, input_dim: int, hidden: Sequence[int] = (64, 32),
               seed: int = 0) -> DenseClassifier:
    """Seeded Glorot-uniform weights (±sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, num_classes]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        act = LINEAR if i == len(dims) - 2 else RELU
        layers.append(Layer(weight, np.zeros(fan_out), act))
    return DenseClassifier(tuple(layers))


# ---------------------------------------------------------------------------
# forward / backward machinery (shared by full models and split suffixes)
# ---------------------------------------------------------------------------

def _forward_cache(layers: Sequence[Layer], X: np.ndarray):
    """Returns (pre-activations per layer, activations incl. input)."""
    pre, acts = [], [X]
    for layer in layers:
        z = acts[-1] @ layer.weight.T + layer.bias
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if layer.activation == RELU else z)
    return pre, acts


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(model: DenseClassifier, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputError(f"expected inputs of width {model.input_dim}, got shape {X.shape}")
    return X


def posteriors(model: DenseClassifier, X: np.ndarray) -> np.ndarray:
    """Class posteriors for a batch, shape (n, K); rows sum to 1."""
    X = _check_batch(model, X)
    pre, _ = _forward_cache(model.layers, X)
    return _softmax(pre[-1])


def forward(model: DenseClassifier, x: np.ndarray) -> np.ndarray:
    """Posterior vector of length K for a single flattened image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise InputError(f"expected an input of length {model.input_dim}, got shape {x.shape}")
    return posteriors(model, x[None])[0]


def predict(model: DenseClassifier, X: np.ndarray) -> np.ndarray:
    return np.argmax(posteriors(model, X), axis=1)


def accuracy(model: DenseClassifier, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise InputError("cannot compute accuracy on an empty dataset")
    return float(np.mean(predict(model, data.images) == data.labels))


def _backprop_to_input(layers: Sequence[Layer], pre, dz_out: np.ndarray) -> np.ndarray:
    """Propagate a gradient w.r.t. the final pre-activation back to the input batch."""
    dz = dz_out
    for i in range(len(layers) - 1, -1, -1):
        da = dz @ layers[i].weight
        if i > 0:
            dz = da * (pre[i - 1] > 0.0) if layers[i - 1].activation == RELU else da
        else:
            return da
    return da


def _backprop_params(layers: Sequence[Layer], pre, acts, dz_out: np.ndarray):
    """Weight/bias gradients for every layer given d(loss)/d(final pre-activation)."""
    grads_w = [None] * len(layers)
    grads_b = [None] * len(layers)
    dz = dz_out
    for i in range(len(layers) - 1, -1, -1):
        grads_w[i] = dz.T @ acts[i]
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            da = dz @ layers[i].weight
            dz = da * (pre[i - 1] > 0.0) if layers[i - 1].activation == RELU else da
    return grads_w, grads_b


# Scalar objectives over the posterior vector. Each factory returns a callable
# p -> (value, d value / d p) so gradients flow through the softmax exactly.

def neg_posterior(target: int) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    def objective(p: np.ndarray):
        grad = np.zeros_like(p)
        grad[target] = -1.0
        return -float(p[target]), grad
    return objective


def neg_log_posterior(target: int) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    def objective(p: np.ndarray):
        grad = np.zeros_like(p)
        grad[target] = -1.0 / p[target]
        return -float(np.log(p[target])), grad
    return objective


def input_gradient(model: DenseClassifier, x: np.ndarray, objective) -> np.ndarray:
    """Gradient of a scalar-of-posterior objective w.r.t. a single input.

    `objective` maps the posterior vector to (value, d value / d posterior).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise InputError(f"expected an input of length {model.input_dim}, got shape {x.shape}")
    pre, _ = _forward_cache(model.layers, x[None])
    p = _softmax(pre[-1])[0]
    _, dp = objective(p)
    dz = (p * (dp - float(dp @ p)))[None]  # softmax Jacobian applied to dp
    return _backprop_to_input(model.layers, pre, dz)[0]


def neg_posterior_batch(model: DenseClassifier, X: np.ndarray, target: int):
    """Mean of -p(target|x) over the batch and its gradient w.r.t. each row."""
    X = _check_batch(model, X)
    pre, _ = _forward_cache(model.layers, X)
    p = _softmax(pre[-1])
    n = X.shape[0]
    value = -float(p[:, target].mean())
    dz = p * p[:, target:target + 1]
    dz[:, target] -= p[:, target]
    dz /= n
    return value, _backprop_to_input(model.layers, pre, dz)


def neg_log_posterior_batch(model: DenseClassifier, X: np.ndarray, target: int):
    """Mean of -log p(target|x) over the batch and its gradient w.r.t. each row."""
    X = _check_batch(model, X)
    pre, _ = _forward_cache(model.layers, X)
    p = _softmax(pre[-1])
    n = X.shape[0]
    value = -float(np.log(p[:, target]).mean())
    dz = p.copy()
    dz[:, target] -= 1.0
    dz /= n
    return value, _backprop_to_input(model.layers, pre, dz)


def cross_entropy_and_param_grads(model: DenseClassifier, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch plus per-layer (dW, db) gradients."""
    X = _check_batch(model, X)
    y = np.asarray(y, dtype=np.int64)
    pre, acts = _forward_cache(model.layers, X)
    p = _softmax(pre[-1])
    n = X.shape[0]
    loss = -float(np.log(p[np.arange(n), y]).mean())
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads_w, grads_b = _backprop_params(model.layers, pre, acts, dz)
    return loss, grads_w, grads_b


class Adam:
    """Plain Adam over a list of parameter arrays (updates in place)."""

    def __init__(self, params: Sequence[np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def train(model: DenseClassifier, data: LabeledDataset, cfg: TrainConfig) -> DenseClassifier:
    """Mini-batch cross-entropy training; a pure function of (model, data, cfg).

    epochs=0 returns the input model itself. Repeated runs with the same
    arguments produce bit-identical weights.
    """
    if len(data) == 0:
        raise InputError("cannot train on an empty dataset")
    if data.input_dim != model.input_dim:
        raise InputError("dataset width does not match the model input dim")
    if data.labels.size and data.labels.max() >= model.num_classes:
        raise InputError("dataset labels exceed the model's class count")
    if cfg.epochs == 0:
        return model

    weights = [layer.weight.copy() for layer in model.layers]
    biases = [layer.bias.copy() for layer in model.layers]
    params = weights + biases
    opt = Adam(params) if cfg.optimizer == ADAPTIVE_MOMENT else None
    rng = np.random.default_rng(cfg.seed)
    n = len(data)

    def current() -> DenseClassifier:
        return DenseClassifier(tuple(
            Layer(w, b, layer.activation)
            for w, b, layer in zip(weights, biases, model.layers)))

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, gw, gb = cross_entropy_and_param_grads(current(), data.images[idx], data.labels[idx])
            grads = gw + gb
            if opt is not None:
                opt.step(params, grads, cfg.learning_rate)
            else:
                for p, g in zip(params, grads):
                    p -= cfg.learning_rate * g
    return current()


# ---------------------------------------------------------------------------
# model splitting: f = f2 ∘ f1 with f1 mapping inputs to intermediate features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSplit:
    prefix: tuple[Layer, ...]
    suffix: DenseClassifier
    layer_index: int

    def features(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        _, acts = _forward_cache(self.prefix, X)
        return acts[-1]

    @property
    def feature_dim(self) -> int:
        return self.prefix[-1].out_dim


def split_at(model: DenseClassifier, layer_index: int) -> ModelSplit:
    """Split into (prefix, suffix) so suffix(prefix(x)) == forward(model, x)."""
    if not 0 < layer_index < len(model.layers):
        raise InputError(f"layer_index must be in (0, {len(model.layers)}), got {layer_index}")
    prefix = model.layers[:layer_index]
    suffix = DenseClassifier(model.layers[layer_index:])
    return ModelSplit(prefix, suffix, layer_index)


def models_equal(a: DenseClassifier, b: DenseClassifier) -> bool:
    """Bit-exact equality of layer structure and parameters."""
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.activation != lb.activation:
            return False
        if la.weight.shape != lb.weight.shape or la.weight.tobytes() != lb.weight.tobytes():
            return False
        if la.bias.tobytes() != lb.bias.tobytes():
            return False
    return True
