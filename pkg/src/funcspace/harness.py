"""Experiment configuration and orchestration.

A config is a JSON object. ``run(config)`` builds the data, networks and
optimizers it names, runs the experiment, and writes ``run.json``,
``metrics.csv`` and the experiment's own CSVs into the output directory.
"""

from __future__ import annotations

import copy
import json
import traceback
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import continual as cl
from .data import Dataset, load_idx, load_mnist, stream, synth_dataset
from .errors import ConfigError
from .io import write_csv, write_json
from .metrics import SCALES, convergence_curve, epoch_average, l2_distance, param_l2_distance, ratio_series, write_ratio_csv
from .nn import init_network
from .optim import (
    HCGD,
    NGD,
    SGD,
    Adam,
    AdamConfig,
    HcgdConfig,
    NgdConfig,
    SgdConfig,
    ValidationSampler,
)
from .train import STEP_COLUMNS, RunLog, Stopwatch, accuracy, train
from .trajectory import build_distance_matrices, classical_mds, save_snapshots, write_embedding_csv, write_matrix_csv

KINDS = ("train", "distances", "embed", "forget", "compare-optimizers", "estimator-convergence")
OPTIMIZERS = {"sgd": SgdConfig, "hcgd": HcgdConfig, "adam": AdamConfig, "ngd": NgdConfig}
DATASETS = ("blobs", "permutable-grid", "mnist", "idx")


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    dataset: dict
    architecture: dict = field(default_factory=lambda: {"hidden": [64]})
    optimizer: dict = field(default_factory=lambda: {"type": "sgd", "lr": 0.1})
    epochs: int = 1
    batch_size: int = 64
    snapshot: str = "epoch"
    probe_size: int = 1024
    output_dir: str = "out"
    seeds: list | None = None
    optimizers: list | None = None
    sample_sizes: list | None = None
    continual: dict = field(default_factory=dict)
    track_path: bool | None = None

    @classmethod
    def from_dict(cls, d: dict, seed=None, output_dir=None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = copy.deepcopy(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if seed is not None:
            d["seed"] = seed
        if output_dir is not None:
            d["output_dir"] = str(output_dir)
        for key in ("kind", "seed", "dataset"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, seed=None, output_dir=None) -> "ExperimentConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(d, seed, output_dir)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        name = self.dataset.get("name")
        if name not in DATASETS:
            raise ConfigError(f"dataset name must be one of {DATASETS}, got {name!r}")
        if name == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                p = self.dataset.get(key)
                if p is None or not Path(p).exists():
                    raise ConfigError(f"dataset file {key}={p!r} does not exist")
        if self.snapshot not in ("epoch", "step", "none"):
            raise ConfigError("snapshot must be 'epoch', 'step' or 'none'")
        if self.epochs < 0 or self.batch_size < 1 or self.probe_size < 1:
            raise ConfigError("epochs must be >= 0, batch_size and probe_size >= 1")
        hidden = self.architecture.get("hidden", [])
        if not all(isinstance(h, int) and h > 0 for h in hidden):
            raise ConfigError("architecture.hidden must list positive integers")
        for spec in self.optimizers or [self.optimizer]:
            make_optimizer_config(spec)
        if self.kind == "estimator-convergence" and not self.sample_sizes:
            raise ConfigError("estimator-convergence needs sample_sizes")
        if self.kind == "forget":
            for m in self.continual.get("methods", cl.METHODS):
                if m not in cl.METHODS:
                    raise ConfigError(f"unknown continual method {m!r}")
            try:
                cl.ContinualConfig(**_continual_kwargs(self))
            except TypeError as e:
                raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}


def make_optimizer_config(spec: dict):
    spec = dict(spec)
    kind = spec.pop("type", None)
    spec.pop("label", None)
    if kind not in OPTIMIZERS:
        raise ConfigError(f"optimizer type must be one of {sorted(OPTIMIZERS)}, got {kind!r}")
    if kind == "hcgd" and isinstance(spec.get("adam"), dict):
        spec["adam"] = AdamConfig(**spec["adam"])
    try:
        return kind, OPTIMIZERS[kind](**spec)
    except TypeError as e:
        raise ConfigError(f"bad {kind} optimizer settings: {e}") from e


def make_optimizer(spec: dict, net, train_set: Dataset, seed: int):
    kind, cfg = make_optimizer_config(spec)
    if kind == "sgd":
        return SGD(net.n_params, cfg)
    if kind == "adam":
        return Adam(net.n_params, cfg)
    if kind == "hcgd":
        return HCGD(net.n_params, cfg, ValidationSampler(train_set.inputs, stream(seed, "validation")))
    return NGD(net.n_params, cfg, stream(seed, "fisher"))


# data --------------------------------------------------------------------------------


def load_data(cfg: ExperimentConfig):
    d = cfg.dataset
    name = d["name"]
    if name in ("blobs", "permutable-grid"):
        classes = int(d.get("classes", 4))
        train_set = synth_dataset(name, int(d.get("n_train", 2000)), classes, stream(cfg.seed, "data", 0))
        test_set = synth_dataset(name, int(d.get("n_test", 1000)), classes, stream(cfg.seed, "data", 1), split="test")
        return train_set, test_set
    if name == "mnist":
        return load_mnist(d.get("n_train"), d.get("n_test"), seed=cfg.seed, root=d.get("root"))
    train_set = load_idx(d["train_images"], d["train_labels"], "train")
    test_set = load_idx(d["test_images"], d["test_labels"], "test")
    return train_set, test_set


def probe_batch(cfg: ExperimentConfig, train_set: Dataset, test_set: Dataset) -> np.ndarray:
    """Held-out probe inputs fixed at run start (``dataset.probe``: test or all)."""
    source = cfg.dataset.get("probe", "test")
    pool = test_set.inputs if source == "test" else np.concatenate([train_set.inputs, test_set.inputs])
    n = min(cfg.probe_size, len(pool))
    idx = np.sort(stream(cfg.seed, "probe").choice(len(pool), n, replace=False))
    return pool[idx]


def make_network(cfg: ExperimentConfig, train_set: Dataset, seed: int):
    dims = [train_set.dim, *cfg.architecture.get("hidden", []), train_set.n_classes]
    act = cfg.architecture.get("activation", "relu")
    activations = [act] * (len(dims) - 2) + ["identity"]
    return init_network(dims, activations, seed=stream(seed, "init"))


# experiments -------------------------------------------------------------------------


def _train_one(cfg, train_set, test_set, probe, seed, opt_spec, snapshot, track_path):
    net = make_network(cfg, train_set, seed)
    opt = make_optimizer(opt_spec, net, train_set, seed)
    res = train(
        net, train_set, opt, cfg.epochs, cfg.batch_size, stream(seed, "data_order"),
        probe=probe, test_set=test_set, snapshot_every=None if snapshot == "none" else snapshot,
        track_path=track_path,
    )
    return net, res


def _exp_train(cfg, data, out, log):
    train_set, test_set = data
    probe = probe_batch(cfg, train_set, test_set)
    track = bool(cfg.track_path)
    net, res = _train_one(cfg, train_set, test_set, probe, cfg.seed, cfg.optimizer, cfg.snapshot, track)
    log.steps.extend(res.steps)
    log.epochs.extend(res.epochs)
    write_csv(out / "metrics.csv", STEP_COLUMNS, res.steps)
    write_csv(out / "epochs.csv", ("epoch", "step", "train_loss", "test_accuracy", "cumulative_path_length"), res.epochs)
    files = ["metrics.csv", "epochs.csv"]
    if res.snapshots:
        save_snapshots(out / "snapshots.fsnp", res.snapshots)
        files.append("snapshots.fsnp")
    if len(res.snapshots) >= 2:
        series = {s: ratio_series(res.snapshots, s) for s in SCALES}
        write_ratio_csv(out / "ratios.csv", series)
        write_ratio_csv(out / "ratios_epoch_avg.csv", {s: epoch_average(p) for s, p in series.items()})
        files += ["ratios.csv", "ratios_epoch_avg.csv"]
    log.final.update(test_accuracy=accuracy(net, test_set), train_loss=res.epochs[-1][2] if res.epochs else None)
    return files


def _runs_over_seeds(cfg, data):
    train_set, test_set = data
    probe = probe_batch(cfg, train_set, test_set)
    seeds = cfg.seeds or [cfg.seed]
    runs, steps = {}, []
    for s in seeds:
        _, res = _train_one(cfg, train_set, test_set, probe, s, cfg.optimizer, "epoch", False)
        runs[s] = res.snapshots
        steps += [(s, *row) for row in res.steps]
    return runs, steps


def _exp_distances(cfg, data, out, log, embed=False):
    runs, steps = _runs_over_seeds(cfg, data)
    write_csv(out / "metrics.csv", ("seed", *STEP_COLUMNS), steps)
    log.steps.extend(steps)
    dp, df = build_distance_matrices(runs)
    write_matrix_csv(out / "param_distances.csv", dp)
    write_matrix_csv(out / "function_distances.csv", df)
    files = ["metrics.csv", "param_distances.csv", "function_distances.csv"]
    final_epoch = max(lab[1] for lab in dp.labels)
    init = [i for i, lab in enumerate(dp.labels) if lab[1] == 0]
    final = {lab[0]: i for i, lab in enumerate(dp.labels) if lab[1] == final_epoch}
    ii = [(a, b) for a in init for b in init if a < b]
    summary = {
        "init_init_function": [float(df.values[a, b]) for a, b in ii],
        "init_init_param": [float(dp.values[a, b]) for a, b in ii],
        "init_final_function": [float(df.values[i, final[dp.labels[i][0]]]) for i in init],
        "init_final_param": [float(dp.values[i, final[dp.labels[i][0]]]) for i in init],
    }
    log.final.update(summary)
    if embed:
        for name, dm in (("param", dp), ("function", df)):
            emb = classical_mds(dm.values, 2)
            write_embedding_csv(out / f"{name}_embedding.csv", dm.labels, emb)
            log.final[f"{name}_stress"] = emb.stress
            files.append(f"{name}_embedding.csv")
    return files


def _exp_compare(cfg, data, out, log):
    train_set, test_set = data
    probe = probe_batch(cfg, train_set, test_set)
    specs = cfg.optimizers or [cfg.optimizer]
    track = True if cfg.track_path is None else cfg.track_path
    steps, epochs = [], []
    for spec in specs:
        label = spec.get("label", spec["type"])
        net, res = _train_one(cfg, train_set, test_set, probe, cfg.seed, spec, "none", track)
        steps += [(label, *row) for row in res.steps]
        epochs += [(label, *row) for row in res.epochs]
        log.final[label] = {"test_accuracy": accuracy(net, test_set), "path_length": res.path_length_by_epoch}
    log.steps.extend(steps)
    log.epochs.extend(epochs)
    write_csv(out / "metrics.csv", ("optimizer", *STEP_COLUMNS), steps)
    write_csv(
        out / "path_length.csv",
        ("optimizer", "epoch", "step", "train_loss", "test_accuracy", "cumulative_path_length"),
        epochs,
    )
    return ["metrics.csv", "path_length.csv"]


def _exp_estimator(cfg, data, out, log):
    train_set, test_set = data
    probe = probe_batch(cfg, train_set, test_set)
    net, res = _train_one(cfg, train_set, test_set, probe, cfg.seed, cfg.optimizer, "epoch", False)
    init, final = res.snapshots[0], res.snapshots[-1]
    curve = convergence_curve(init.probe_outputs, final.probe_outputs, cfg.sample_sizes, stream(cfg.seed, "subsample"))
    full = l2_distance(init.probe_outputs, final.probe_outputs)
    rows = [(s, e, r) for s, e, r in zip(curve.sample_sizes, curve.estimates, curve.relative_errors())]
    write_csv(out / "metrics.csv", STEP_COLUMNS, res.steps)
    write_csv(out / "convergence.csv", ("sample_size", "estimate", "relative_error"), rows)
    log.steps.extend(res.steps)
    log.final.update(
        reference=curve.reference, reference_n=full.n, std_single=full.std_single,
        param_distance=param_l2_distance(init.params, final.params),
        estimates=dict(zip(map(str, curve.sample_sizes), curve.estimates)),
    )
    return ["metrics.csv", "convergence.csv"]


def _continual_kwargs(cfg):
    kw = {k: v for k, v in cfg.continual.items() if k not in ("methods", "tasks", "epochs_per_task", "identity_first")}
    kw.setdefault("hidden", tuple(cfg.architecture.get("hidden", (400, 400))))
    kw.setdefault("batch_size", cfg.batch_size)
    kw["seed"] = cfg.seed
    return kw


def _exp_forget(cfg, data, out, log):
    train_set, test_set = data
    c = cfg.continual
    seq = cl.TaskSequence.build(
        train_set, test_set, int(c.get("tasks", 8)), cfg.seed,
        int(c.get("epochs_per_task", cfg.epochs)), bool(c.get("identity_first", False)),
    )
    ccfg = cl.ContinualConfig(**_continual_kwargs(cfg))
    steps, first, files = [], [], ["metrics.csv", "first_task.csv"]
    for method in c.get("methods", cl.METHODS):
        r = cl.run_continual(seq, method, ccfg)
        steps += [(method, *row) for row in r.steps]
        cl.write_accuracy_csv(out / f"accuracy_{method}.csv", r.accuracy)
        files.append(f"accuracy_{method}.csv")
        first += [(method, t, a) for t, a in enumerate(r.first_task_curve)]
        log.final[method] = {"first_task": r.first_task_curve.tolist(), "final_mean": float(np.mean(r.accuracy[-1]))}
    log.steps.extend(steps)
    write_csv(out / "metrics.csv", ("method", "step", "task", "epoch", "train_loss", "penalty_value", "delta_norm"), steps)
    write_csv(out / "first_task.csv", ("method", "after_task", "accuracy"), first)
    return files


EXPERIMENTS = {
    "train": _exp_train,
    "distances": _exp_distances,
    "embed": lambda cfg, data, out, log: _exp_distances(cfg, data, out, log, embed=True),
    "forget": _exp_forget,
    "compare-optimizers": _exp_compare,
    "estimator-convergence": _exp_estimator,
}


def run(cfg: ExperimentConfig | dict) -> RunLog:
    """Run one experiment and write its outputs.

    Failures are recorded in ``run.json`` (status ``failed``) and re-raised.
    """
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog(cfg.to_dict())
    watch = Stopwatch()
    try:
        data = load_data(cfg)
        log.outputs = EXPERIMENTS[cfg.kind](cfg, data, out, log)
        log.status = "ok"
    except BaseException as e:
        log.status = "failed"
        log.error = "".join(traceback.format_exception_only(type(e), e)).strip()
        log.outputs = sorted(p.name for p in out.iterdir() if p.name != "run.json")
        raise
    finally:
        log.wall_clock = watch.elapsed()
        write_json(out / "run.json", log.to_dict())
    return log
