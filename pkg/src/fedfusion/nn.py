"""Minimal dense-network engine for binary classifiers.

Plain numpy, double precision, fully deterministic under a seed: forward
pass, analytic backprop through a class-weighted binary cross-entropy,
and SGD/Adam steps. No autograd, no GPU; meant for small tabular models.
"""

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

ACTIVATIONS = ("relu", "sigmoid", "identity")

# Probabilities are clamped to [PROB_CLIP, 1 - PROB_CLIP] before any log.
PROB_CLIP = 1e-7


def derive_seed(base, *parts):
    """Derive a stable 64-bit child seed from a base seed and context labels.

    Labels may be ints or strings; strings are hashed with crc32 so the
    derivation is reproducible across platforms and processes.
    """
    entropy = [int(base) & 0xFFFFFFFFFFFFFFFF]
    for p in parts:
        if isinstance(p, str):
            entropy.append(zlib.crc32(p.encode("utf-8")))
        else:
            entropy.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class Layer:
    weights: np.ndarray  # (n_out, n_in)
    bias: np.ndarray  # (n_out,)
    activation: str

    def copy(self):
        return Layer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class ModelParams:
    layers: list

    def copy(self):
        return ModelParams([layer.copy() for layer in self.layers])

    @property
    def dims(self):
        """Layer widths as [in, hidden..., out]."""
        return [self.layers[0].weights.shape[1]] + [l.weights.shape[0] for l in self.layers]

    @property
    def input_dim(self):
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].weights.shape[0]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    optimizer: str = "adam"  # "sgd" | "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not (0 <= self.adam_beta1 < 1) or not (0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)  # per layer: (mW, mb)
    v: list = field(default_factory=list)


def init_params(layer_dims, activations, seed):
    """Initialize a dense net: uniform weights in +/- sqrt(6/(fan_in+fan_out)), zero biases."""
    if len(layer_dims) < 2:
        raise ConfigError(f"need at least [input, output] dims, got {list(layer_dims)}")
    if len(activations) != len(layer_dims) - 1:
        raise ConfigError(
            f"expected {len(layer_dims) - 1} activations for {len(layer_dims)} dims, "
            f"got {len(activations)}"
        )
    for d in layer_dims:
        if d < 1:
            raise ConfigError(f"layer dims must be >= 1, got {list(layer_dims)}")
    for act in activations:
        if act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(layer_dims[:-1], layer_dims[1:], activations):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return ModelParams(layers)


def sigmoid(x):
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _apply_activation(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return sigmoid(z)
    if act == "identity":
        return z
    raise ConfigError(f"unknown activation {act!r}")


def _activation_grad(z, a, act):
    # derivative of the activation at pre-activation z (a = activation(z))
    if act == "relu":
        return (z > 0).astype(np.float64)
    if act == "sigmoid":
        return a * (1.0 - a)
    if act == "identity":
        return np.ones_like(z)
    raise ConfigError(f"unknown activation {act!r}")


def _as_batch(x, input_dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"input has shape {x.shape}, model expects (*, {input_dim})")
    return x, single


def _forward_pass(params, x):
    """Returns (pre_activations, activations) per layer for batch x (n, in)."""
    zs, acts = [], []
    a = x
    for layer in params.layers:
        z = a @ layer.weights.T + layer.bias
        a = _apply_activation(z, layer.activation)
        zs.append(z)
        acts.append(a)
    return zs, acts


def forward(params, x):
    """Run the net on a sample or batch.

    Returns (output, hidden) where hidden lists the post-activation of every
    layer except the last; hidden[-1] is the last hidden layer.
    """
    batch, single = _as_batch(x, params.input_dim)
    _, acts = _forward_pass(params, batch)
    out = acts[-1]
    hidden = acts[:-1]
    if single:
        return out[0], [h[0] for h in hidden]
    return out, hidden


def predict_probs(params, x):
    """Forward pass of a single-unit head, flattened to shape (n,)."""
    if params.output_dim != 1:
        raise ShapeError(f"predict_probs expects a 1-unit head, got {params.output_dim}")
    batch, single = _as_batch(x, params.input_dim)
    _, acts = _forward_pass(params, batch)
    out = acts[-1][:, 0]
    return out[0] if single else out


def class_balanced_weights(class_counts, beta):
    """Per-class loss weights from effective sample numbers.

    Effective number of class c is (1 - beta**n_c) / (1 - beta); the raw
    weight is its inverse and the pair is normalized to sum to 2 (the
    number of classes), so beta = 0 yields (1.0, 1.0).
    """
    n0, n1 = class_counts
    if not (0.0 <= beta < 1.0):
        raise ConfigError(f"class-balance beta must lie in [0, 1), got {beta}")
    if n0 < 1 or n1 < 1:
        raise ConfigError(f"need at least one sample per class, got counts ({n0}, {n1})")
    if beta == 0.0:
        return (1.0, 1.0)
    raw = np.array(
        [(1.0 - beta) / (1.0 - beta**n) for n in (n0, n1)], dtype=np.float64
    )
    w = 2.0 * raw / raw.sum()
    return (float(w[0]), float(w[1]))


def _check_prob_label_shapes(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise ShapeError(f"probs shape {probs.shape} vs labels shape {labels.shape}")
    if probs.size == 0:
        raise ShapeError("empty batch")
    return probs, labels.astype(np.float64)


def weighted_bce_loss(probs, labels, weights):
    """Mean class-weighted binary cross-entropy; probs clamped away from {0,1}."""
    probs, y = _check_prob_label_shapes(probs, labels)
    w0, w1 = weights
    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    w = np.where(y == 1.0, w1, w0)
    return float(np.mean(-w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def _loss_and_grads(params, x, y, weights):
    """One combined forward/backward pass; returns (loss, grads).

    grads is a list of (dW, db) matching the layer shapes. The gradient is
    exact for the clamped loss: samples whose probability falls outside the
    clamp interval contribute zero gradient.
    """
    batch, _ = _as_batch(x, params.input_dim)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (batch.shape[0],):
        raise ShapeError(f"labels shape {y.shape} vs batch of {batch.shape[0]} rows")
    if params.output_dim != 1:
        raise ShapeError("loss expects a 1-unit head")
    n = batch.shape[0]
    w0, w1 = weights
    zs, acts = _forward_pass(params, batch)

    probs = acts[-1][:, 0]
    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    w = np.where(y == 1.0, w1, w0)
    loss = float(np.mean(-w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))

    # dL/dp on the clamped interior, zero where the clamp is active
    interior = (probs > PROB_CLIP) & (probs < 1.0 - PROB_CLIP)
    dloss_dp = (w / n) * (-y / p + (1.0 - y) / (1.0 - p)) * interior

    grads = [None] * len(params.layers)
    delta = (dloss_dp * _activation_grad(zs[-1][:, 0], acts[-1][:, 0], params.layers[-1].activation))[:, None]
    for k in range(len(params.layers) - 1, -1, -1):
        a_prev = batch if k == 0 else acts[k - 1]
        grads[k] = (delta.T @ a_prev, delta.sum(axis=0))
        if k > 0:
            da = delta @ params.layers[k].weights
            layer = params.layers[k - 1]
            delta = da * _activation_grad(zs[k - 1], acts[k - 1], layer.activation)
    return loss, grads


def backward(params, batch_x, batch_y, weights):
    """Analytic gradient of weighted_bce_loss w.r.t. every weight and bias."""
    _, grads = _loss_and_grads(params, batch_x, batch_y, weights)
    return grads


def optimizer_step(params, grads, opt_state, cfg):
    """Apply one SGD or Adam step; returns (new_params, new_state).

    Functional: input params are not mutated. For SGD opt_state stays None.
    """
    if len(grads) != len(params.layers):
        raise ShapeError("gradient/layer count mismatch")
    for layer, (dw, db) in zip(params.layers, grads):
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise ShapeError("gradient shape mismatch")
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        layers = [
            Layer(l.weights - lr * dw, l.bias - lr * db, l.activation)
            for l, (dw, db) in zip(params.layers, grads)
        ]
        return ModelParams(layers), opt_state

    if opt_state is None:
        opt_state = AdamState(
            m=[(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers],
            v=[(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers],
        )
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    t = opt_state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    layers, new_m, new_v = [], [], []
    for layer, (dw, db), (mw, mb), (vw, vb) in zip(params.layers, grads, opt_state.m, opt_state.v):
        mw = b1 * mw + (1.0 - b1) * dw
        mb = b1 * mb + (1.0 - b1) * db
        vw = b2 * vw + (1.0 - b2) * dw**2
        vb = b2 * vb + (1.0 - b2) * db**2
        w = layer.weights - lr * (mw / c1) / (np.sqrt(vw / c2) + eps)
        b = layer.bias - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
        layers.append(Layer(w, b, layer.activation))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    return ModelParams(layers), AdamState(step=t, m=new_m, v=new_v)


def train(params, x, y, weights, cfg, rng=None, opt_state=None):
    """Mini-batch training loop.

    Each epoch visits a seeded permutation of the rows; the last short batch
    is kept. Passing an rng/opt_state lets callers continue a stream across
    calls (the federated client does this between rounds).

    Returns (params, opt_state, epoch_losses) where epoch_losses holds the
    mean pre-step batch loss per epoch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"x shape {x.shape} vs y shape {y.shape}")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    n = x.shape[0]
    epoch_losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = _loss_and_grads(params, x[idx], y[idx], weights)
            params, opt_state = optimizer_step(params, grads, opt_state, cfg)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    return params, opt_state, epoch_losses


def train_classifier(x, y, weights, layer_dims, cfg):
    """Initialize and train a fresh sigmoid-head classifier.

    Initialization uses cfg.rng_seed directly; the shuffle stream uses a
    child seed so init and batching are independent draws.

    Returns (params, epoch_losses).
    """
    dims = list(layer_dims)
    activations = ["relu"] * (len(dims) - 2) + ["sigmoid"]
    params = init_params(dims, activations, cfg.rng_seed)
    rng = np.random.default_rng(derive_seed(cfg.rng_seed, "shuffle"))
    params, _, losses = train(params, x, y, weights, cfg, rng=rng)
    return params, losses
