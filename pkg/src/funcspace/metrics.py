"""Empirical L2 function distances and l2 parameter distances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, UsageError
from .io import write_csv

Z95 = 1.96
SCALES = ("between_updates", "between_epochs", "from_init")


@dataclass(frozen=True)
class L2Estimate:
    """Batch estimate of ``||f - g||`` with per-example statistics."""

    distance: float
    mean_sq: float
    per_example_sq: np.ndarray
    std_single: float
    n: int
    ci95_low: float
    ci95_high: float


@dataclass(frozen=True)
class ConvergenceCurve:
    sample_sizes: list
    estimates: list
    reference: float

    def relative_errors(self) -> np.ndarray:
        est = np.asarray(self.estimates)
        if self.reference == 0:
            return np.where(est == 0, 0.0, np.inf)
        return np.abs(est - self.reference) / self.reference


@dataclass(frozen=True)
class RatioPoint:
    step: int
    epoch: int
    l2_param: float
    l2_function: float
    std_single: float
    n: int


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"output shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.ndim != 2 or len(a) == 0:
        raise ShapeError(f"need an N x K matrix with N >= 1, got shape {a.shape}")
    return a, b


def per_example_sq(outputs_a, outputs_b) -> np.ndarray:
    a, b = _pair(outputs_a, outputs_b)
    d = a - b
    return np.einsum("ij,ij->i", d, d)


def mean_sq_distance(outputs_a, outputs_b) -> float:
    return float(per_example_sq(outputs_a, outputs_b).mean())


def l2_distance(outputs_a, outputs_b) -> L2Estimate:
    """Empirical L2 distance between two functions evaluated on the same inputs.

    The 95% interval is a normal interval on the mean squared difference,
    clamped at zero and mapped through the square root.
    """
    sq = per_example_sq(outputs_a, outputs_b)
    n = len(sq)
    mean_sq = float(sq.mean())
    std = float(sq.std(ddof=1)) if n > 1 else 0.0
    half = Z95 * std / np.sqrt(n)
    return L2Estimate(
        distance=float(np.sqrt(mean_sq)),
        mean_sq=mean_sq,
        per_example_sq=sq,
        std_single=std,
        n=n,
        ci95_low=float(np.sqrt(max(mean_sq - half, 0.0))),
        ci95_high=float(np.sqrt(mean_sq + half)),
    )


def param_l2_distance(params_a, params_b) -> float:
    a = np.asarray(params_a, dtype=np.float64)
    b = np.asarray(params_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"parameter vectors differ in length: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def convergence_curve(outputs_a, outputs_b, sample_sizes: Sequence[int], seed) -> ConvergenceCurve:
    """Distance estimates on random subsamples of increasing size.

    Each size draws its own subsample without replacement; the reference uses
    every available example.
    """
    a, b = _pair(outputs_a, outputs_b)
    n_total = len(a)
    sizes = sorted(int(s) for s in sample_sizes)
    if not sizes or sizes[0] < 1:
        raise UsageError("sample sizes must be positive")
    if len(set(sizes)) != len(sizes):
        raise UsageError("sample sizes must be distinct")
    if sizes[-1] > n_total:
        raise UsageError(f"sample size {sizes[-1]} exceeds the {n_total} available examples")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sq = per_example_sq(a, b)
    reference = float(np.sqrt(sq.mean()))
    estimates = []
    for s in sizes:
        if s == n_total:
            estimates.append(reference)
            continue
        idx = rng.choice(n_total, size=s, replace=False)
        estimates.append(float(np.sqrt(sq[idx].mean())))
    return ConvergenceCurve(sizes, estimates, reference)


def cumulative_path_length(probe_outputs: Sequence[np.ndarray]) -> np.ndarray:
    """Running sum of squared L2 distances between consecutive checkpoints.

    Entry ``t`` covers the moves up to checkpoint ``t + 1``.
    """
    if len(probe_outputs) < 2:
        raise UsageError("need at least two checkpoints")
    shape = np.shape(probe_outputs[0])
    incs = np.empty(len(probe_outputs) - 1)
    for t in range(1, len(probe_outputs)):
        if np.shape(probe_outputs[t]) != shape:
            raise ShapeError(f"checkpoint {t} has shape {np.shape(probe_outputs[t])}, expected {shape}")
        incs[t - 1] = mean_sq_distance(probe_outputs[t], probe_outputs[t - 1])
    return np.cumsum(incs)


class PathLengthMeter:
    """Streaming version of :func:`cumulative_path_length`."""

    def __init__(self, first_outputs):
        self._prev = np.array(first_outputs, dtype=np.float64)
        self.total = 0.0
        self.increments = []

    def update(self, outputs) -> float:
        outputs = np.asarray(outputs, dtype=np.float64)
        inc = mean_sq_distance(outputs, self._prev)
        self.total += inc
        self.increments.append(inc)
        self._prev = outputs.copy()
        return inc


def ratio_series(snapshots, scale: str) -> list:
    """(parameter distance, function distance) pairs along a trajectory.

    ``scale`` picks the reference for each checkpoint: the previous
    checkpoint (``between_updates``), the last checkpoint of the previous
    epoch (``between_epochs``) or the first checkpoint (``from_init``).
    Snapshots need ``params``, ``probe_outputs``, ``step`` and ``epoch``.
    """
    if scale not in SCALES:
        raise UsageError(f"scale must be one of {SCALES}, got {scale!r}")
    if len(snapshots) < 2:
        raise UsageError("need at least two snapshots")

    def point(snap, ref):
        est = l2_distance(snap.probe_outputs, ref.probe_outputs)
        return RatioPoint(
            snap.step, snap.epoch, param_l2_distance(snap.params, ref.params),
            est.distance, est.std_single, est.n,
        )

    if scale == "from_init":
        return [point(s, snapshots[0]) for s in snapshots]
    if scale == "between_updates":
        return [point(s, r) for r, s in zip(snapshots[:-1], snapshots[1:])]

    out = []
    last_of_epoch = {}
    for s in snapshots:
        last_of_epoch[s.epoch] = s
    epochs = sorted(last_of_epoch)
    for s in snapshots:
        earlier = [e for e in epochs if e < s.epoch]
        if earlier:
            out.append(point(s, last_of_epoch[earlier[-1]]))
    return out


def epoch_average(points) -> list:
    """Average every point within an epoch into one RatioPoint (step = last step)."""
    by_epoch = {}
    for p in points:
        by_epoch.setdefault(p.epoch, []).append(p)
    out = []
    for epoch in sorted(by_epoch):
        ps = by_epoch[epoch]
        out.append(RatioPoint(
            ps[-1].step, epoch,
            float(np.mean([p.l2_param for p in ps])),
            float(np.mean([p.l2_function for p in ps])),
            float(np.mean([p.std_single for p in ps])),
            ps[-1].n,
        ))
    return out


RATIO_COLUMNS = ("step", "scale", "l2_param", "L2_function", "std_single", "n")


def write_ratio_csv(path, series: dict) -> None:
    """Write ``{scale: [RatioPoint, ...]}`` as CSV with :data:`RATIO_COLUMNS`."""
    rows = (
        (p.step, scale, p.l2_param, p.l2_function, p.std_single, p.n)
        for scale, points in series.items()
        for p in points
    )
    write_csv(path, RATIO_COLUMNS, rows)
