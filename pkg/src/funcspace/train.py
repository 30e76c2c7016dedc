"""Minibatch training loop with optional snapshots and path-length tracking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .data import Dataset
from .metrics import PathLengthMeter
from .nn import Network, forward
from .optim import Optimizer
from .trajectory import Snapshot, record_snapshot

STEP_COLUMNS = ("step", "epoch", "train_loss", "penalty_value", "passes_used", "delta_norm", "probe_l2_increment")
EPOCH_COLUMNS = ("epoch", "step", "train_loss", "test_accuracy", "cumulative_path_length")


@dataclass
class RunLog:
    """Record of one experiment; serialized once, at the end."""

    config: dict
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    status: str = "running"
    error: str | None = None
    outputs: list = field(default_factory=list)
    version: str = __version__
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "final": self.final,
            "status": self.status,
            "error": self.error,
            "outputs": self.outputs,
            "version": self.version,
            "wall_clock_seconds": self.wall_clock,
            "n_steps": len(self.steps),
            "epochs": self.epochs,
        }


@dataclass
class TrainResult:
    steps: list
    epochs: list
    snapshots: list
    path_length_by_epoch: list


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Index arrays for one shuffled pass; a short final batch is kept."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def accuracy(net: Network, data: Dataset, chunk: int = 4096) -> float:
    passes = net.passes
    correct = 0
    for i in range(0, len(data), chunk):
        out = forward(net, data.inputs[i : i + chunk], mode="raw")
        correct += int(np.sum(out.argmax(axis=1) == data.labels[i : i + chunk]))
    net.passes = passes
    return correct / len(data)


def train(
    net: Network,
    train_set: Dataset,
    optimizer: Optimizer,
    epochs: int,
    batch_size: int,
    order_rng: np.random.Generator,
    probe=None,
    test_set: Dataset | None = None,
    snapshot_every: str | None = "epoch",
    track_path: bool = False,
    on_step=None,
) -> TrainResult:
    """Train ``net`` in place.

    ``probe`` is the fixed probe input batch used for snapshots and for
    the per-step path-length increment when ``track_path`` is set.
    ``snapshot_every`` is ``"epoch"``, ``"step"`` or ``None``; the initial
    network is always captured (epoch 0, step 0) when snapshotting.
    """
    steps, epoch_rows, snaps, path_by_epoch = [], [], [], []
    probe_inputs = None if probe is None else np.asarray(getattr(probe, "inputs", probe))
    meter = None
    if probe_inputs is not None and track_path:
        meter = PathLengthMeter(_probe_outputs(net, probe_inputs))
    if snapshot_every and probe_inputs is not None:
        snaps.append(record_snapshot(net, probe_inputs, 0, 0))
    step = 0
    for epoch in range(1, epochs + 1):
        losses = []
        for idx in epoch_batches(len(train_set), batch_size, order_rng):
            info = optimizer.step(net, train_set.batch(idx))
            step += 1
            inc = meter.update(_probe_outputs(net, probe_inputs)) if meter else float("nan")
            row = (step, epoch, info.loss, info.penalty, info.passes, info.delta_norm, inc)
            steps.append(row)
            losses.append(info.loss)
            if snapshot_every == "step":
                snaps.append(record_snapshot(net, probe_inputs, step, epoch))
            if on_step is not None:
                on_step(step, epoch, info)
        if snapshot_every == "epoch":
            snaps.append(record_snapshot(net, probe_inputs, step, epoch))
        test_acc = accuracy(net, test_set) if test_set is not None else float("nan")
        path = meter.total if meter else float("nan")
        path_by_epoch.append(path)
        epoch_rows.append((epoch, step, float(np.mean(losses)), test_acc, path))
    return TrainResult(steps, epoch_rows, snaps, path_by_epoch)


def _probe_outputs(net, probe_inputs):
    passes = net.passes
    out = forward(net, probe_inputs, mode="softmax")
    net.passes = passes
    return out


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start
