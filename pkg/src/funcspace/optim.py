"""Optimizers: SGD, Adam, Hilbert-constrained gradient descent (HCGD) and
natural gradient computed by an inner loop of gradient descent.

Every ``*_step`` function updates ``net.params`` in place, mutates its state
object, and returns a :class:`StepInfo`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .nn import Batch, Network, custom_loss_grad, forward, function_distance_loss, loss_and_grad, per_example_grads

EPS_NUM = 1e-12


@dataclass
class StepInfo:
    loss: float
    penalty: float = 0.0
    passes: int = 0
    delta_norm: float = 0.0


# SGD ---------------------------------------------------------------------------------


@dataclass
class SgdConfig:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class SgdState:
    velocity: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n))


def _grad_with_decay(net, batch, weight_decay):
    loss, g = loss_and_grad(net, batch)
    if weight_decay:
        g = g + weight_decay * net.params
    return loss, g


def sgd_step(net: Network, batch: Batch, cfg: SgdConfig, state: SgdState) -> StepInfo:
    """``v <- momentum*v + lr*(J + wd*theta)``; ``theta <- theta - v``."""
    start = net.passes
    loss, g = _grad_with_decay(net, batch, cfg.weight_decay)
    state.velocity *= cfg.momentum
    state.velocity += cfg.lr * g
    net.params -= state.velocity
    return StepInfo(loss, passes=net.passes - start, delta_norm=float(np.linalg.norm(state.velocity)))


# Adam / RMSprop ----------------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    u: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_delta(grad: np.ndarray, cfg: AdamConfig, state: AdamState) -> np.ndarray:
    """Advance the Adam moments with ``grad`` and return the update to add to theta."""
    state.t += 1
    state.m *= cfg.beta1
    state.m += (1 - cfg.beta1) * grad
    state.u *= cfg.beta2
    state.u += (1 - cfg.beta2) * grad * grad
    m_hat = state.m / (1 - cfg.beta1**state.t)
    u_hat = state.u / (1 - cfg.beta2**state.t)
    return -cfg.lr * m_hat / (np.sqrt(u_hat) + cfg.eps)


def adam_step(net: Network, batch: Batch, cfg: AdamConfig | float, state: AdamState, extra_grad=None) -> StepInfo:
    """One Adam step. ``extra_grad`` is added to the cross-entropy gradient."""
    if not isinstance(cfg, AdamConfig):
        cfg = AdamConfig(lr=float(cfg))
    start = net.passes
    loss, g = loss_and_grad(net, batch)
    if extra_grad is not None:
        g = g + extra_grad
    delta = adam_delta(g, cfg, state)
    net.params += delta
    return StepInfo(loss, passes=net.passes - start, delta_norm=float(np.linalg.norm(delta)))


@dataclass
class RmspropConfig:
    lr: float = 1e-3
    alpha: float = 0.99
    eps: float = 1e-8


@dataclass
class RmspropState:
    sq: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n))


def rmsprop_delta(grad, cfg: RmspropConfig, state: RmspropState) -> np.ndarray:
    state.sq *= cfg.alpha
    state.sq += (1 - cfg.alpha) * grad * grad
    return -cfg.lr * grad / (np.sqrt(state.sq) + cfg.eps)


# HCGD --------------------------------------------------------------------------------


@dataclass
class HcgdConfig:
    lr: float = 0.1
    inner_lr: float = 0.02
    lam: float = 0.5
    momentum: float = 0.9
    n_corrections: int = 1
    val_batch_size: int = 256
    fresh_val_per_correction: bool = True
    proposal: str = "sgd"
    weight_decay: float = 0.0
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.n_corrections < 1:
            raise ConfigError("n_corrections must be >= 1")
        if self.lam < 0 or self.inner_lr < 0 or self.lr < 0:
            raise ConfigError("lr, inner_lr and lam must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.proposal not in ("sgd", "adam"):
            raise ConfigError(f"proposal must be 'sgd' or 'adam', got {self.proposal!r}")
        if self.val_batch_size < 1:
            raise ConfigError("val_batch_size must be >= 1")


@dataclass
class HcgdState:
    velocity: np.ndarray
    adam: AdamState | None = None

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), AdamState.zeros(n))


class ValidationSampler:
    """Draws validation batches from a pool of inputs, reshuffling when exhausted."""

    def __init__(self, inputs, seed):
        self.inputs = np.asarray(getattr(inputs, "inputs", inputs), dtype=np.float64)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._order = self.rng.permutation(len(self.inputs))
        self._pos = 0

    def draw(self, n: int) -> np.ndarray:
        n = min(n, len(self.inputs))
        if self._pos + n > len(self._order):
            self._order = self.rng.permutation(len(self.inputs))
            self._pos = 0
        idx = self._order[self._pos : self._pos + n]
        self._pos += n
        return self.inputs[idx]


def l2_penalty_grad(net: Network, ref_outputs, val_inputs, lam: float, params=None, eps: float = EPS_NUM):
    """``lam * sqrt(mean_i |f_ref(x_i) - f_params(x_i)|^2 + eps)`` and its gradient.

    The gradient is taken with respect to the evaluated parameters
    (``params``, default ``net.params``), which equals the gradient with
    respect to the proposed displacement. ``ref_outputs`` are constants.
    """
    ref_outputs = np.asarray(ref_outputs, dtype=np.float64)
    val_inputs = np.asarray(val_inputs, dtype=np.float64)
    if ref_outputs.shape != (len(val_inputs), net.n_outputs):
        raise ShapeError(f"reference outputs {ref_outputs.shape} do not match the validation batch")
    return custom_loss_grad(net, val_inputs, function_distance_loss(ref_outputs, lam, eps), params=params)


def hcgd_objective(net: Network, J, delta, val_inputs, lam: float) -> float:
    """Linearized cost ``J.delta + lam * ||f_theta - f_(theta + delta)||`` on a batch."""
    ref = forward(net, val_inputs)
    moved = forward(net, val_inputs, params=net.params + delta)
    d = ref - moved
    return float(J @ delta + lam * np.sqrt(np.sum(d * d) / len(d)))


def hcgd_step(net: Network, train_batch: Batch, val_source, cfg: HcgdConfig, state: HcgdState) -> StepInfo:
    """One outer HCGD step with ``cfg.n_corrections`` corrective iterations.

    ``val_source`` is a :class:`ValidationSampler` (or anything with
    ``draw(n)``). With fresh validation batches each outer step costs
    ``2 + 3n`` network passes.
    """
    start = net.passes
    loss, J = _grad_with_decay(net, train_batch, cfg.weight_decay)
    if cfg.proposal == "adam":
        if state.adam is None:
            state.adam = AdamState.zeros(net.n_params)
        delta = adam_delta(J, cfg.adam, state.adam)
    else:
        state.velocity *= cfg.momentum
        state.velocity += cfg.lr * J
        delta = -state.velocity.copy()

    penalty = 0.0
    val = ref = None
    for j in range(1, cfg.n_corrections + 1):
        if ref is None or cfg.fresh_val_per_correction:
            val = val_source.draw(cfg.val_batch_size)
            ref = forward(net, val)
        penalty, g = l2_penalty_grad(net, ref, val, cfg.lam, params=net.params + delta)
        if j > 1:
            g = g + J
        delta -= cfg.inner_lr * g
        if cfg.proposal == "sgd":
            state.velocity += cfg.inner_lr * g
    net.params += delta
    return StepInfo(loss, penalty, net.passes - start, float(np.linalg.norm(delta)))


# Natural gradient by gradient descent ------------------------------------------------


class FisherOperator:
    """Matrix-free Fisher ``F = G G^T / N`` from per-example gradients ``G`` (P x N)."""

    def __init__(self, G: np.ndarray, mode: str = "empirical"):
        G = np.asarray(G, dtype=np.float64)
        if G.ndim != 2 or G.shape[1] < 1:
            raise ShapeError(f"G must be P x N with N >= 1, got {G.shape}")
        self.G = G
        self.mode = mode

    @classmethod
    def from_network(cls, net: Network, batch: Batch, mode: str = "empirical", seed=None):
        return cls(per_example_grads(net, batch, mode=mode, seed=seed), mode)

    @property
    def n_params(self):
        return self.G.shape[0]

    @property
    def n_examples(self):
        return self.G.shape[1]

    def apply(self, v) -> np.ndarray:
        return fisher_vector_product(self, v)

    def dense(self) -> np.ndarray:
        """Explicit matrix; for checks on small problems only."""
        return self.G @ self.G.T / self.n_examples


def fisher_vector_product(F: FisherOperator, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (F.n_params,):
        raise ShapeError(f"vector length {v.shape} does not match {F.n_params} parameters")
    return F.G @ (F.G.T @ v) / F.n_examples


def ngd_correct(delta0, J, F: FisherOperator, lam: float, eta: float, n: int):
    """Run ``delta <- delta - eta * (J + lam * F delta)`` ``n`` times.

    Returns ``(delta, residual_norms)`` where residual ``i`` is
    ``||J + lam * F delta_i||``. The residual cannot grow when
    ``eta < 2 / (lam * max eig F)``; growth is reported as a
    :class:`DivergenceError`.
    """
    delta = np.array(delta0, dtype=np.float64)
    J = np.asarray(J, dtype=np.float64)
    r = J + lam * fisher_vector_product(F, delta)
    norms = [float(np.linalg.norm(r))]
    floor = 1e-10 * max(np.linalg.norm(J), norms[0])
    for _ in range(n):
        delta -= eta * r
        r = J + lam * fisher_vector_product(F, delta)
        norms.append(float(np.linalg.norm(r)))
        if not np.isfinite(norms[-1]) or (norms[-1] > norms[-2] * (1 + 1e-8) and norms[-1] > floor):
            raise DivergenceError(
                f"natural-gradient correction diverged (residual {norms[-2]:.3e} -> {norms[-1]:.3e}); "
                "reduce the inner learning rate",
                residuals=norms,
            )
    return delta, norms


def fisher_max_eigenvalue(F: FisherOperator, iters: int = 100, seed=0) -> float:
    """Largest eigenvalue of F by power iteration on matrix-free products."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=F.n_params)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = fisher_vector_product(F, v)
        lam = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
    return lam


@dataclass
class NgdConfig:
    inner_lr: float = 0.01
    lam: float = 1.0
    n_corrections: int = 5
    proposer: str = "rmsprop"
    lr: float = 1e-3
    fisher_mode: str = "empirical"

    def __post_init__(self):
        if self.n_corrections < 0:
            raise ConfigError("n_corrections must be >= 0")
        if self.proposer not in ("rmsprop", "adam"):
            raise ConfigError(f"proposer must be 'rmsprop' or 'adam', got {self.proposer!r}")
        if self.fisher_mode not in ("empirical", "sampled"):
            raise ConfigError(f"fisher_mode must be 'empirical' or 'sampled', got {self.fisher_mode!r}")


@dataclass
class NgdState:
    adam: AdamState
    rmsprop: RmspropState

    @classmethod
    def zeros(cls, n):
        return cls(AdamState.zeros(n), RmspropState.zeros(n))


def ngd_by_gd_step(net: Network, batch: Batch, cfg: NgdConfig, state: NgdState, seed=None) -> StepInfo:
    """Propose with RMSprop or Adam, then correct towards ``-(1/lam) F^-1 J``.

    On divergence the parameters are left untouched and the
    :class:`DivergenceError` propagates.
    """
    start = net.passes
    loss, J = loss_and_grad(net, batch)
    if cfg.proposer == "adam":
        delta = adam_delta(J, AdamConfig(lr=cfg.lr), state.adam)
    else:
        delta = rmsprop_delta(J, RmspropConfig(lr=cfg.lr), state.rmsprop)
    if cfg.n_corrections:
        F = FisherOperator.from_network(net, batch, cfg.fisher_mode, seed=seed)
        delta, _ = ngd_correct(delta, J, F, cfg.lam, cfg.inner_lr, cfg.n_corrections)
    net.params += delta
    return StepInfo(loss, passes=net.passes - start, delta_norm=float(np.linalg.norm(delta)))


# Stateful wrappers used by the training loop -----------------------------------------


class Optimizer:
    name = "optimizer"

    def step(self, net: Network, batch: Batch) -> StepInfo:
        raise NotImplementedError

    def scale_lr(self, factor: float) -> None:
        """Multiplicative learning-rate decay hook."""
        raise NotImplementedError


class SGD(Optimizer):
    name = "sgd"

    def __init__(self, n_params, cfg: SgdConfig):
        self.cfg = cfg
        self.state = SgdState.zeros(n_params)

    def step(self, net, batch):
        return sgd_step(net, batch, self.cfg, self.state)

    def scale_lr(self, factor):
        self.cfg.lr *= factor


class Adam(Optimizer):
    name = "adam"

    def __init__(self, n_params, cfg: AdamConfig | None = None):
        self.cfg = cfg or AdamConfig()
        self.state = AdamState.zeros(n_params)

    def step(self, net, batch, extra_grad=None):
        return adam_step(net, batch, self.cfg, self.state, extra_grad=extra_grad)

    def scale_lr(self, factor):
        self.cfg.lr *= factor


class HCGD(Optimizer):
    name = "hcgd"

    def __init__(self, n_params, cfg: HcgdConfig, val_source):
        self.cfg = cfg
        self.state = HcgdState.zeros(n_params)
        self.val_source = val_source

    def step(self, net, batch):
        return hcgd_step(net, batch, self.val_source, self.cfg, self.state)

    def scale_lr(self, factor):
        self.cfg.lr *= factor
        self.cfg.adam.lr *= factor


class NGD(Optimizer):
    name = "ngd"

    def __init__(self, n_params, cfg: NgdConfig, seed=0):
        self.cfg = cfg
        self.state = NgdState.zeros(n_params)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def step(self, net, batch):
        return ngd_by_gd_step(net, batch, self.cfg, self.state, seed=self.rng)

    def scale_lr(self, factor):
        self.cfg.lr *= factor
