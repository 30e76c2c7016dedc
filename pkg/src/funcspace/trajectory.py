"""Training snapshots, distance matrices between them, and 2-D embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import io
from .errors import ShapeError, UsageError
from .metrics import param_l2_distance, per_example_sq
from .nn import Network, forward


@dataclass
class Snapshot:
    step: int
    epoch: int
    params: np.ndarray
    probe_outputs: np.ndarray
    wall_note: str | None = None


@dataclass
class DistanceMatrix:
    labels: list
    values: np.ndarray


@dataclass
class Embedding2D:
    points: np.ndarray
    eigenvalues: np.ndarray
    stress: float


def record_snapshot(net: Network, probe_inputs, step: int, epoch: int, wall_note=None) -> Snapshot:
    """Copy the parameters and record softmax outputs on the probe batch."""
    probe = np.asarray(getattr(probe_inputs, "inputs", probe_inputs), dtype=np.float64)
    if probe.ndim != 2 or probe.shape[1] != net.n_inputs:
        raise ShapeError(f"probe batch shape {probe.shape} does not fit a {net.n_inputs}-input network")
    passes = net.passes
    outputs = forward(net, probe, mode="softmax")
    net.passes = passes  # measurement is not part of the optimizer's cost
    return Snapshot(int(step), int(epoch), net.params.copy(), outputs, wall_note)


def _check_run(snaps):
    p = len(snaps[0].params)
    shape = snaps[0].probe_outputs.shape
    for s in snaps:
        if len(s.params) != p:
            raise ShapeError("parameter length changes within a run")
        if s.probe_outputs.shape != shape:
            raise ShapeError("probe output shape changes within a run")


def build_distance_matrices(runs, probe_ids: Sequence | None = None):
    """Pairwise l2 (parameter) and L2 (function) distances across snapshots.

    ``runs`` is a list of snapshot lists, one per run, or a dict mapping a run
    id to its snapshots. ``probe_ids`` optionally names the probe batch used
    by each run; function distances across runs are refused when they differ.
    Labels are ``(run_id, epoch)``.
    """
    items = list(runs.items()) if isinstance(runs, dict) else list(enumerate(runs))
    if not items or any(len(s) == 0 for _, s in items):
        raise UsageError("every run needs at least one snapshot")
    if probe_ids is not None:
        if len(set(map(str, probe_ids))) > 1:
            raise ShapeError("runs used different probe batches; cross-run function distances are undefined")
    snaps, labels = [], []
    for run_id, run in items:
        _check_run(run)
        for s in run:
            snaps.append(s)
            labels.append((run_id, s.epoch))
    _check_run(snaps)

    m = len(snaps)
    dp, df = np.zeros((m, m)), np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            dp[i, j] = dp[j, i] = param_l2_distance(snaps[i].params, snaps[j].params)
            df[i, j] = df[j, i] = np.sqrt(per_example_sq(snaps[i].probe_outputs, snaps[j].probe_outputs).mean())
    return DistanceMatrix(labels, dp), DistanceMatrix(list(labels), df)


def jacobi_eigh(A: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching eigenvectors as
    columns.
    """
    A = np.array(A, dtype=np.float64)
    n = len(A)
    V = np.eye(n)
    scale = max(np.abs(A).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(A, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def classical_mds(d, dims: int = 2) -> Embedding2D:
    """Torgerson MDS of a distance matrix (DistanceMatrix or square array)."""
    D = np.asarray(d.values if isinstance(d, DistanceMatrix) else d, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {D.shape}")
    m = len(D)
    if m < dims + 1:
        raise UsageError(f"need at least {dims + 1} points for a {dims}-D embedding")
    if not np.allclose(D, D.T, rtol=0, atol=1e-12 * max(np.abs(D).max(), 1.0)):
        raise ShapeError("distance matrix is not symmetric")
    J = np.eye(m) - 1.0 / m
    B = -0.5 * J @ (D * D) @ J
    B = 0.5 * (B + B.T)
    w, V = jacobi_eigh(B)
    top = np.maximum(w[:dims], 0.0)
    X = V[:, :dims] * np.sqrt(top)
    X -= X.mean(axis=0)
    diff = X[:, None, :] - X[None, :, :]
    Dhat = np.sqrt(np.sum(diff * diff, axis=-1))
    denom = np.sum(D * D)
    stress = float(np.sqrt(np.sum((D - Dhat) ** 2) / denom)) if denom > 0 else 0.0
    return Embedding2D(X, top, stress)


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


# persistence -------------------------------------------------------------------------


def save_snapshots(path, snapshots: Sequence[Snapshot]) -> None:
    _check_run(snapshots)
    s0 = snapshots[0]
    io.save_fsnp(
        path,
        [(s.step, s.epoch, s.params, s.probe_outputs) for s in snapshots],
        len(s0.params),
        s0.probe_outputs.shape,
    )


def load_snapshots(path) -> list:
    _, records = io.load_fsnp(path)
    return [Snapshot(step, epoch, params, probe) for step, epoch, params, probe in records]


def write_matrix_csv(path, dm: DistanceMatrix) -> None:
    io.write_matrix_csv(path, dm.labels, dm.values)


def write_embedding_csv(path, labels, emb: Embedding2D) -> None:
    rows = []
    for lab, (x, y) in zip(labels, emb.points):
        run_id, epoch = lab
        rows.append((run_id, epoch, x, y))
    io.write_csv(path, ("run", "epoch", "x", "y"), rows)
