"""Permuted-task continual learning: a working-memory L2 regularizer, EWC,
retraining on the memory cache, and plain Adam as the control."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, stream
from .errors import ConfigError, ShapeError
from .io import atomic_write_bytes, load_fsnp, save_fsnp, write_csv
from .nn import Batch, Network, custom_loss_grad, forward, function_distance_loss, init_network, squared_grad_mean
from .optim import Adam, AdamConfig, Optimizer
from .train import accuracy, epoch_batches

METHODS = ("adam", "adam_retrain", "l2_memory", "ewc")
L2_LAMBDA = 1.3
EWC_LAMBDA = 500.0
RETRAIN_EVERY = 10
MEMORY_CAPACITY = 1024


# tasks -------------------------------------------------------------------------------


def permutation_for(dim: int, seed, identity: bool = False) -> np.ndarray:
    """Seeded Fisher-Yates shuffle of ``range(dim)``."""
    if identity:
        return np.arange(dim)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = np.arange(dim)
    for i in range(dim - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def make_permuted_task(base: Dataset, seed=None, identity: bool = False, perm=None) -> Dataset:
    """``base`` with input coordinates reordered; labels unchanged."""
    if perm is None:
        perm = permutation_for(base.dim, seed, identity)
    perm = np.asarray(perm)
    if perm.shape != (base.dim,) or not np.array_equal(np.sort(perm), np.arange(base.dim)):
        raise ShapeError("permutation is not a bijection on the input coordinates")
    return Dataset(base.inputs[:, perm], base.labels.copy(), base.split, base.name, base.n_classes)


def inverse_permutation(perm) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


@dataclass
class TaskSequence:
    train: Dataset
    test: Dataset
    permutations: list
    epochs_per_task: int = 10

    @classmethod
    def build(cls, train, test, n_tasks, seed, epochs_per_task=10, identity_first=False):
        perms = [
            permutation_for(train.dim, stream(seed, "permutations", t), identity=identity_first and t == 0)
            for t in range(n_tasks)
        ]
        return cls(train, test, perms, epochs_per_task)

    def __len__(self):
        return len(self.permutations)

    def task(self, t, split="train") -> Dataset:
        base = self.train if split == "train" else self.test
        return make_permuted_task(base, perm=self.permutations[t])


# working memory ----------------------------------------------------------------------


@dataclass
class WorkingMemory:
    """Balanced cache of past-task inputs with the outputs recorded at each task's end."""

    capacity: int
    inputs: np.ndarray
    recorded_outputs: np.ndarray
    task_ids: np.ndarray
    labels: np.ndarray

    @classmethod
    def empty(cls, capacity, dim, n_outputs):
        if capacity < 1:
            raise ConfigError("memory capacity must be >= 1")
        return cls(capacity, np.zeros((0, dim)), np.zeros((0, n_outputs)), np.zeros(0, np.int64), np.zeros(0, np.int64))

    def __len__(self):
        return len(self.task_ids)

    def counts(self) -> dict:
        ids, n = np.unique(self.task_ids, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, n)}

    def batch(self) -> Batch:
        return Batch(self.inputs, self.labels)


def _quotas(capacity, task_ids):
    base, extra = divmod(capacity, len(task_ids))
    return {t: base + (1 if i < extra else 0) for i, t in enumerate(task_ids)}


def update_memory(mem: WorkingMemory, task: Dataset, net: Network, task_id: int, rng) -> WorkingMemory:
    """Rebalance the cache to admit ``task_id`` and fill its share.

    Older tasks lose uniformly random examples down to an equal quota; the
    new task contributes fresh random examples whose outputs are recorded from
    ``net`` as it stands now.
    """
    old = sorted(mem.counts())
    if task_id in old:
        raise ConfigError(f"task {task_id} is already in memory")
    tasks = old + [task_id]
    if mem.capacity < len(tasks):
        raise ConfigError(f"memory capacity {mem.capacity} cannot hold one example from each of {len(tasks)} tasks")
    quota = _quotas(mem.capacity, tasks)
    keep = []
    for t in old:
        idx = np.flatnonzero(mem.task_ids == t)
        if len(idx) > quota[t]:
            idx = np.sort(rng.choice(idx, quota[t], replace=False))
        keep.append(idx)
    keep = np.concatenate(keep) if keep else np.zeros(0, np.int64)
    n_new = min(quota[task_id], len(task))
    pick = np.sort(rng.choice(len(task), n_new, replace=False))
    new_inputs = task.inputs[pick]
    passes = net.passes
    new_outputs = forward(net, new_inputs, mode="softmax")
    net.passes = passes
    return WorkingMemory(
        mem.capacity,
        np.concatenate([mem.inputs[keep], new_inputs]),
        np.concatenate([mem.recorded_outputs[keep], new_outputs]),
        np.concatenate([mem.task_ids[keep], np.full(n_new, task_id, np.int64)]),
        np.concatenate([mem.labels[keep], task.labels[pick]]),
    )


def l2_memory_loss(net: Network, mem: WorkingMemory, lam: float = L2_LAMBDA, squared: bool = False, eps: float = 1e-12):
    """``(lam/2) * sqrt(mean ||f(x) - recorded(x)||^2 + eps)`` over the cache.

    ``squared=True`` drops the square root. An empty cache costs nothing.
    """
    if len(mem) == 0:
        return 0.0, np.zeros(net.n_params)
    if net.output_mode != "softmax":
        raise ConfigError("recorded outputs are post-softmax; the network must be in softmax mode")
    return custom_loss_grad(net, mem.inputs, function_distance_loss(mem.recorded_outputs, lam / 2, eps, squared))


def save_memory(path, mem: WorkingMemory) -> None:
    """FSNP container (one record per example, params = the input row) plus a JSON sidecar."""
    records = [(i, int(t), x, o[None, :]) for i, (t, x, o) in enumerate(zip(mem.task_ids, mem.inputs, mem.recorded_outputs))]
    save_fsnp(path, records, mem.inputs.shape[1], (1, mem.recorded_outputs.shape[1]))
    side = {"capacity": mem.capacity, "task_ids": mem.task_ids.tolist(), "labels": mem.labels.tolist()}
    atomic_write_bytes(str(path) + ".json", json.dumps(side).encode())


def load_memory(path) -> WorkingMemory:
    header, records = load_fsnp(path)
    with open(str(path) + ".json") as f:
        side = json.load(f)
    d, k = header["param_len"], header["probe_k"]
    inputs = np.array([r[2] for r in records]).reshape(-1, d)
    outputs = np.array([r[3][0] for r in records]).reshape(-1, k)
    task_ids = np.array(side["task_ids"], dtype=np.int64)
    if not np.array_equal(task_ids, [r[1] for r in records]):
        raise ShapeError("sidecar task ids disagree with the container")
    return WorkingMemory(side["capacity"], inputs, outputs, task_ids, np.array(side["labels"], dtype=np.int64))


# EWC ---------------------------------------------------------------------------------


@dataclass
class EwcState:
    theta_A: np.ndarray
    fisher_diag: np.ndarray
    lam: float = EWC_LAMBDA

    def __post_init__(self):
        self.theta_A = np.asarray(self.theta_A, dtype=np.float64)
        self.fisher_diag = np.asarray(self.fisher_diag, dtype=np.float64)
        if self.theta_A.shape != self.fisher_diag.shape:
            raise ShapeError("theta_A and fisher_diag lengths differ")
        if np.any(self.fisher_diag < 0):
            raise ShapeError("fisher_diag must be nonnegative")


def ewc_diag_fisher(net: Network, data, n_samples=None, rng=None, chunk: int = 2048) -> np.ndarray:
    """Mean squared per-example cross-entropy gradient, coordinate-wise."""
    batch = data.batch() if isinstance(data, Dataset) else data
    x, y = batch.inputs, batch.targets
    if n_samples is not None and n_samples < len(x):
        idx = np.sort(rng.choice(len(x), n_samples, replace=False))
        x, y = x[idx], y[idx]
    total = np.zeros(net.n_params)
    for i in range(0, len(x), chunk):
        xi = x[i : i + chunk]
        total += len(xi) * squared_grad_mean(net, Batch(xi, y[i : i + chunk]))
    return total / len(x)


def ewc_loss(params, states) -> tuple:
    """Sum over states of ``(lam/2) * sum F * (theta - theta_A)^2`` and its gradient."""
    params = np.asarray(params, dtype=np.float64)
    value, grad = 0.0, np.zeros_like(params)
    for s in states:
        if s.theta_A.shape != params.shape:
            raise ShapeError(f"EWC state has {s.theta_A.size} params, network has {params.size}")
        d = params - s.theta_A
        value += 0.5 * s.lam * float(np.sum(s.fisher_diag * d * d))
        grad += s.lam * s.fisher_diag * d
    return value, grad


# retrain baseline --------------------------------------------------------------------


def retrain_step(net: Network, mem: WorkingMemory, optimizer: Optimizer, step: int, every_n: int = RETRAIN_EVERY) -> bool:
    """One optimizer step on the whole cache when ``step % every_n == 0``."""
    if len(mem) == 0 or step % every_n:
        return False
    optimizer.step(net, mem.batch())
    return True


# experiment --------------------------------------------------------------------------


@dataclass
class ContinualConfig:
    hidden: tuple = (400, 400)
    batch_size: int = 128
    lr: float = 1e-3
    capacity: int = MEMORY_CAPACITY
    l2_lambda: float = L2_LAMBDA
    l2_squared: bool = False
    ewc_lambda: float = EWC_LAMBDA
    fisher_samples: int | None = None
    retrain_every: int = RETRAIN_EVERY
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1 or self.lr <= 0 or self.capacity < 1 or self.retrain_every < 1:
            raise ConfigError("batch_size, lr, capacity and retrain_every must be positive")


@dataclass
class ContinualResult:
    method: str
    accuracy: np.ndarray  # [after task t, on task k], NaN above the diagonal
    steps: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def first_task_curve(self):
        return self.accuracy[:, 0]


def write_accuracy_csv(path, acc: np.ndarray) -> None:
    T = acc.shape[1]
    rows = [[t, *("" if np.isnan(v) else v for v in acc[t])] for t in range(len(acc))]
    write_csv(path, ["after_task", *(f"task_{k}" for k in range(T))], rows)


def run_continual(seq: TaskSequence, method: str, cfg: ContinualConfig | None = None, on_step=None) -> ContinualResult:
    """Train on each task in turn; record test accuracy on all tasks seen so far."""
    cfg = cfg or ContinualConfig()
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    if method in ("l2_memory", "adam_retrain") and cfg.capacity < len(seq):
        raise ConfigError(f"capacity {cfg.capacity} is below the number of tasks {len(seq)}")
    T = len(seq)
    k = seq.train.n_classes
    net = init_network([seq.train.dim, *cfg.hidden, k], seed=stream(cfg.seed, "init"))
    opt = Adam(net.n_params, AdamConfig(lr=cfg.lr))
    order_rng = stream(cfg.seed, "data_order")
    mem_rng = stream(cfg.seed, "memory")
    fisher_rng = stream(cfg.seed, "fisher")
    mem = WorkingMemory.empty(cfg.capacity, seq.train.dim, k)
    ewc_states: list = []
    acc = np.full((T, T), np.nan)
    tests = [seq.task(t, "test") for t in range(T)]
    steps = []
    step = 0
    for t in range(T):
        task = seq.task(t)
        for epoch in range(seq.epochs_per_task):
            for idx in epoch_batches(len(task), cfg.batch_size, order_rng):
                penalty, extra = 0.0, None
                if method == "l2_memory" and len(mem):
                    penalty, extra = l2_memory_loss(net, mem, cfg.l2_lambda, cfg.l2_squared)
                elif method == "ewc" and ewc_states:
                    penalty, extra = ewc_loss(net.params, ewc_states)
                info = opt.step(net, task.batch(idx), extra_grad=extra)
                step += 1
                if method == "adam_retrain":
                    retrain_step(net, mem, opt, step, cfg.retrain_every)
                steps.append((step, t, epoch + 1, info.loss, penalty, info.delta_norm))
                if on_step is not None:
                    on_step(step, t, info)
        for j in range(t + 1):
            acc[t, j] = accuracy(net, tests[j])
        if method in ("l2_memory", "adam_retrain"):
            mem = update_memory(mem, task, net, t, mem_rng)
        elif method == "ewc":
            fisher = ewc_diag_fisher(net, task, cfg.fisher_samples, fisher_rng)
            ewc_states.append(EwcState(net.params.copy(), fisher, cfg.ewc_lambda))
    return ContinualResult(method, acc, steps, asdict(cfg))
