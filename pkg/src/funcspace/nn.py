"""Dense feedforward networks with exact backpropagation.

Parameters live in one flat float64 vector. The layout is layer-major with
the weight matrix (row-major, shape ``(fan_in, fan_out)``) followed by the
bias vector of each layer, so two snapshots of the same architecture can be
compared coordinate by coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

ACTIVATIONS = ("relu", "tanh", "identity")
OUTPUT_MODES = ("softmax", "raw")

# loss_fn(outputs) -> (scalar loss, dloss/doutputs)
LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ShapeError(f"batch inputs must be 2-D, got shape {self.inputs.shape}")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.int64)
            if self.targets.shape != (len(self.inputs),):
                raise ShapeError(
                    f"targets shape {self.targets.shape} does not match {len(self.inputs)} inputs"
                )

    def __len__(self):
        return len(self.inputs)


@dataclass
class Network:
    """A dense network ``f_theta``.

    ``passes`` counts forward and backward passes made through the network;
    the optimizers use it for cost accounting.
    """

    layer_dims: list[int]
    activations: list[str]
    params: np.ndarray
    output_mode: str = "softmax"
    passes: int = field(default=0, compare=False)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.activations = list(self.activations)
        _check_architecture(self.layer_dims, self.activations, self.output_mode)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (num_params(self.layer_dims),):
            raise ShapeError(
                f"expected {num_params(self.layer_dims)} params, got shape {self.params.shape}"
            )
        self._slices = _layer_slices(self.layer_dims)

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return len(self.params)

    def layers(self, params: np.ndarray | None = None):
        """Yield ``(W, b, activation)`` views into ``params`` (default: own params)."""
        p = self.params if params is None else params
        for (ws, shape, bs), act in zip(self._slices, self.activations):
            yield p[ws].reshape(shape), p[bs], act

    def copy(self) -> "Network":
        return Network(self.layer_dims, self.activations, self.params.copy(), self.output_mode)


def num_params(layer_dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def _check_architecture(dims, activations, output_mode):
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ConfigError(f"layer_dims needs at least two positive widths, got {dims}")
    if len(activations) != len(dims) - 1:
        raise ConfigError(
            f"need one activation per layer ({len(dims) - 1}), got {len(activations)}"
        )
    bad = [a for a in activations if a not in ACTIVATIONS]
    if bad:
        raise ConfigError(f"unknown activation(s) {bad}; choose from {ACTIVATIONS}")
    if output_mode not in OUTPUT_MODES:
        raise ConfigError(f"output_mode must be one of {OUTPUT_MODES}, got {output_mode!r}")


def _layer_slices(dims):
    out, offset = [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        ws = slice(offset, offset + a * b)
        offset += a * b
        bs = slice(offset, offset + b)
        offset += b
        out.append((ws, (a, b), bs))
    return out


def init_network(
    layer_dims: Sequence[int],
    activations: Sequence[str] | None = None,
    output_mode: str = "softmax",
    seed=0,
) -> Network:
    """Create a network with uniform fan-in/fan-out scaled weights and zero biases.

    ``activations`` defaults to relu on hidden layers and identity on the
    output layer. ``seed`` may be an int, a SeedSequence or a Generator.
    """
    layer_dims = list(layer_dims) if layer_dims is not None else []
    if activations is None:
        activations = ["relu"] * max(len(layer_dims) - 2, 0) + ["identity"]
    _check_architecture(layer_dims, list(activations), output_mode)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = np.zeros(num_params(layer_dims))
    for ws, (fan_in, fan_out), _ in _layer_slices(layer_dims):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[ws] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return Network(list(layer_dims), list(activations), params, output_mode)


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z, a, act):
    if act == "relu":
        return (z > 0).astype(np.float64)
    if act == "tanh":
        return 1.0 - a * a
    return None


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _inputs_of(net, batch):
    x = batch.inputs if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.n_inputs:
        raise ShapeError(f"network expects inputs of width {net.n_inputs}, got shape {x.shape}")
    return x


class _Trace:
    """Activations kept from a forward pass for the backward pass."""

    def __init__(self, inputs, pre, post):
        self.inputs = inputs
        self.pre = pre
        self.post = post

    @property
    def logits(self):
        # output of the last layer, after its own activation
        return self.post[-1]


def _forward_trace(net, x, params):
    pre, post = [], []
    a = x
    for W, b, act in net.layers(params):
        z = a @ W + b
        a = _activate(z, act)
        pre.append(z)
        post.append(a)
    net.passes += 1
    return _Trace(x, pre, post)


def _output_of(net, trace, mode):
    last = trace.post[-1]
    return softmax(last) if mode == "softmax" else last


def forward(net: Network, batch, params: np.ndarray | None = None, mode: str | None = None):
    """Network outputs for a batch (N x K).

    ``params`` evaluates the same architecture at another parameter vector
    (used for ``theta + delta``); ``mode`` overrides ``net.output_mode``.
    """
    x = _inputs_of(net, batch)
    trace = _forward_trace(net, x, net.params if params is None else params)
    return _output_of(net, trace, mode or net.output_mode)


def _backward(net, trace, grad_last, params):
    """Backpropagate dL/d(last layer output) to a flat parameter gradient."""
    grad = np.empty(net.n_params)
    layers = list(net.layers(params))
    delta = grad_last
    for i in range(len(layers) - 1, -1, -1):
        W, _, act = layers[i]
        d = _activation_grad(trace.pre[i], trace.post[i], act)
        if d is not None:
            delta = delta * d
        a_prev = trace.inputs if i == 0 else trace.post[i - 1]
        ws, _, bs = net._slices[i]
        grad[ws] = (a_prev.T @ delta).ravel()
        grad[bs] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ W.T
    net.passes += 1
    return grad


def _per_example_backward(net, trace, grad_last, params):
    """Per-example gradients, one column per row of ``grad_last``."""
    n = len(grad_last)
    G = np.empty((net.n_params, n))
    layers = list(net.layers(params))
    delta = grad_last
    for i in range(len(layers) - 1, -1, -1):
        W, _, act = layers[i]
        d = _activation_grad(trace.pre[i], trace.post[i], act)
        if d is not None:
            delta = delta * d
        a_prev = trace.inputs if i == 0 else trace.post[i - 1]
        ws, (fan_in, fan_out), bs = net._slices[i]
        G[ws] = np.einsum("ni,nj->ijn", a_prev, delta).reshape(fan_in * fan_out, n)
        G[bs] = delta.T
        if i > 0:
            delta = delta @ W.T
    net.passes += 1
    return G


def _require_targets(net, batch):
    if not isinstance(batch, Batch) or batch.targets is None:
        raise UsageError("this operation needs a Batch with targets")
    t = batch.targets
    if len(t) and (t.min() < 0 or t.max() >= net.n_outputs):
        raise ShapeError(f"labels must lie in [0, {net.n_outputs})")
    return t


def _softmax_backward(p, g):
    return p * (g - np.sum(g * p, axis=1, keepdims=True))


def loss_and_grad(net: Network, batch: Batch, params: np.ndarray | None = None):
    """Mean cross-entropy of softmax(logits) against the targets, and its gradient."""
    targets = _require_targets(net, batch)
    x = _inputs_of(net, batch)
    p_ = net.params if params is None else params
    trace = _forward_trace(net, x, p_)
    logp = log_softmax(trace.logits)
    n = len(x)
    loss = -logp[np.arange(n), targets].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return float(loss), _backward(net, trace, dlogits, p_)


def per_example_grads(net: Network, batch: Batch, mode: str = "empirical", seed=None):
    """Per-example cross-entropy gradients as a P x N matrix.

    ``mode="empirical"`` uses the true labels; ``mode="sampled"`` draws one
    label per example from the network's own predictive distribution, using
    ``seed`` (int, SeedSequence or Generator).
    """
    x = _inputs_of(net, batch)
    trace = _forward_trace(net, x, net.params)
    p = softmax(trace.logits)
    n = len(x)
    if mode == "empirical":
        labels = _require_targets(net, batch)
    elif mode == "sampled":
        if seed is None:
            raise UsageError("sampled mode needs a seed")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        cdf = np.cumsum(p, axis=1)
        u = rng.random(n)[:, None]
        labels = np.minimum((u > cdf).sum(axis=1), net.n_outputs - 1)
    else:
        raise ConfigError(f"mode must be 'empirical' or 'sampled', got {mode!r}")
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return _per_example_backward(net, trace, dlogits, net.params)


def squared_grad_mean(net: Network, batch: Batch) -> np.ndarray:
    """Coordinate-wise mean of squared per-example gradients, without forming G.

    For a dense layer the per-example weight gradient is an outer product,
    so its elementwise square is the outer product of the squares.
    """
    targets = _require_targets(net, batch)
    x = _inputs_of(net, batch)
    trace = _forward_trace(net, x, net.params)
    n = len(x)
    delta = softmax(trace.logits)
    delta[np.arange(n), targets] -= 1.0
    out = np.empty(net.n_params)
    layers = list(net.layers())
    for i in range(len(layers) - 1, -1, -1):
        W, _, act = layers[i]
        d = _activation_grad(trace.pre[i], trace.post[i], act)
        if d is not None:
            delta = delta * d
        a_prev = trace.inputs if i == 0 else trace.post[i - 1]
        ws, _, bs = net._slices[i]
        out[ws] = ((a_prev**2).T @ delta**2).ravel() / n
        out[bs] = (delta**2).mean(axis=0)
        if i > 0:
            delta = delta @ W.T
    net.passes += 1
    return out


def custom_loss_grad(net: Network, batch, loss_fn: LossFn, params: np.ndarray | None = None):
    """Value and parameter gradient of ``loss_fn(f_theta(x))``.

    ``loss_fn`` receives the network outputs (softmax or raw per
    ``net.output_mode``) and returns ``(value, d value / d outputs)``. Anything
    it closes over is a constant as far as the gradient is concerned.
    """
    x = _inputs_of(net, batch)
    p_ = net.params if params is None else params
    trace = _forward_trace(net, x, p_)
    out = _output_of(net, trace, net.output_mode)
    value, g = loss_fn(out)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != out.shape:
        raise ShapeError(f"loss gradient shape {g.shape} does not match outputs {out.shape}")
    if net.output_mode == "softmax":
        g = _softmax_backward(out, g)
    return float(value), _backward(net, trace, g, p_)


# Loss closures for custom_loss_grad -------------------------------------------------


def linear_loss(weights: np.ndarray) -> LossFn:
    """``sum(weights * outputs)``."""
    weights = np.asarray(weights, dtype=np.float64)

    def fn(out):
        return float(np.sum(weights * out)), weights

    return fn


def half_squared_error(reference: np.ndarray) -> LossFn:
    """``0.5 * ||outputs - reference||^2`` summed over the batch."""
    reference = np.asarray(reference, dtype=np.float64)

    def fn(out):
        diff = out - reference
        return 0.5 * float(np.sum(diff * diff)), diff

    return fn


def function_distance_loss(
    reference: np.ndarray, scale: float = 1.0, eps: float = 1e-12, squared: bool = False
) -> LossFn:
    """``scale * sqrt(mean_i ||out_i - ref_i||^2 + eps)``.

    With ``squared=True`` the loss is ``scale * mean_i ||out_i - ref_i||^2``.
    ``eps`` keeps the gradient defined where the two functions coincide.
    """
    reference = np.asarray(reference, dtype=np.float64)

    def fn(out):
        n = len(out)
        diff = out - reference
        mean_sq = float(np.sum(diff * diff)) / n
        if squared:
            return scale * mean_sq, (2.0 * scale / n) * diff
        root = np.sqrt(mean_sq + eps)
        return scale * root, (scale / (n * root)) * diff

    return fn
