"""Experiment orchestration and artifact files.

run_experiment drives the full pipeline on one master seed: generate data,
split it, train the requested methods, evaluate them on the held-out test
set, and write a self-contained output directory:

    config.echo            effective configuration, flat key=value
    data.{labeled,unlabeled,test}.csv
    history.<method>.csv   objective terms per step
    timings.<method>.csv   per-step wall-clock sidecar
    checkpoint.<method>    trained parameters
    grid.<method>.csv      p(class 1) over a grid (plus chain std for sslapd)
    samples.<method>.csv   ancestral samples (generative methods)
    report.csv             method,accuracy,avg_loglik,seed
    report.txt             aligned table including wall-clock seconds
    timings.csv            method,seconds sidecar
    fig_*.png              rendered figures (optional)

Wall-clock numbers never enter report.csv, history CSVs, or any other
value-bearing CSV, so seed-fixed reruns reproduce those files byte for byte.
A run that raises leaves a FAILED marker file holding the error text.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import figures
from .data import Dataset, DatasetSplit, generate_two_moons, save_dataset, split_labeled
from .errors import UsageError
from .model import (BaselineModel, MODE_BAYES, generate, save_checkpoint)
from .nn_core import named_rng
from .predictor import (PredictConfig, evaluate_predictive, predict_dnn_proba,
                        predict_proba)
from .trainer import (MODE_DNN, MODE_SSLAPD, MODE_SSLPE, MODES, TrainConfig,
                      save_history, save_timings, train)

REPORT_HEADER = "method,accuracy,avg_loglik,seed"
REPORT_TIMINGS_HEADER = "method,seconds"


@dataclass
class GridSpec:
    x1_lo: float
    x1_hi: float
    x2_lo: float
    x2_hi: float
    resolution: int = 100

    def __post_init__(self):
        if not (self.x1_lo < self.x1_hi and self.x2_lo < self.x2_hi):
            raise UsageError("grid ranges need lo < hi")
        if self.resolution < 2:
            raise UsageError("grid resolution must be >= 2")

    @classmethod
    def from_data(cls, x, expand: float = 0.5, resolution: int = 100):
        """Data bounding box expanded by `expand` of its span per side."""
        x = np.asarray(x, dtype=np.float64)
        lo, hi = x.min(axis=0), x.max(axis=0)
        pad = np.where(hi > lo, expand * (hi - lo), 0.5)
        return cls(lo[0] - pad[0], hi[0] + pad[0],
                   lo[1] - pad[1], hi[1] + pad[1], resolution)

    def nodes(self) -> np.ndarray:
        """Grid nodes in row order: x2 outer, x1 inner."""
        x1 = np.linspace(self.x1_lo, self.x1_hi, self.resolution)
        x2 = np.linspace(self.x2_lo, self.x2_hi, self.resolution)
        xx1, xx2 = np.meshgrid(x1, x2)
        return np.column_stack([xx1.ravel(), xx2.ravel()])


@dataclass
class MethodResult:
    method: str
    accuracy: float
    avg_loglik: float
    seconds: float
    seed: int


@dataclass
class ExperimentReport:
    results: list = field(default_factory=list)

    def by_method(self) -> dict:
        return {r.method: r for r in self.results}


@dataclass
class ExperimentConfig:
    out_dir: str = "run"
    seed: int = 0
    n: int = 20000
    noise_sigma: float = 0.1
    test_fraction: float = 0.5
    per_class: int = 3
    labeled_indices: tuple | None = None
    methods: tuple = (MODE_DNN, MODE_SSLPE, MODE_SSLAPD)
    train: TrainConfig = field(default_factory=TrainConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    grid_resolution: int = 100
    grid_expand: float = 0.5
    n_samples: int = 1000
    render_figures: bool = True

    def __post_init__(self):
        unknown = set(self.methods) - set(MODES)
        if unknown:
            raise UsageError(f"unknown methods: {sorted(unknown)}")
        if self.n_samples < 1:
            raise UsageError("n_samples must be >= 1")

    def echo_lines(self) -> list:
        """Flat key=value lines of the full effective configuration."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("train", "predict"):
                for sub in fields(value):
                    lines.append(f"{f.name}.{sub.name}={getattr(value, sub.name)}")
            elif f.name == "methods":
                lines.append(f"methods={','.join(value)}")
            elif f.name == "labeled_indices":
                joined = ("" if value is None
                          else ",".join(str(int(i)) for i in value))
                lines.append(f"labeled_indices={joined}")
            else:
                lines.append(f"{f.name}={value}")
        return lines


def contour_grid(model, grid: GridSpec, cfg: PredictConfig) -> np.ndarray:
    """p(class 1) at every grid node; Bayesian-classifier models also get
    the standard deviation of p(class 1) across chains."""
    nodes = grid.nodes()
    if isinstance(model, BaselineModel):
        p1 = predict_dnn_proba(model, nodes)[:, 1]
        return np.column_stack([nodes, p1])
    if model.mode == MODE_BAYES:
        probs, chain_means = predict_proba(model, nodes, cfg, per_chain=True)
        spread = chain_means[:, :, 1].std(axis=0, ddof=1 if cfg.chains > 1 else 0)
        return np.column_stack([nodes, probs[:, 1], spread])
    return np.column_stack([nodes, predict_proba(model, nodes, cfg)[:, 1]])


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")


def save_grid(path, rows) -> None:
    header = "x1,x2,p1,p1_std" if rows.shape[1] == 4 else "x1,x2,p1"
    _write_csv(path, header, rows)


def save_samples(path, z, x, y) -> None:
    header = ",".join([f"z{i + 1}" for i in range(z.shape[1])]
                      + ["x1", "x2", "y"])
    with open(path, "w", newline="") as f:
        f.write(header + "\n")
        for i in range(z.shape[0]):
            cells = [f"{v:.17g}" for v in z[i]] + [f"{v:.17g}" for v in x[i]]
            f.write(",".join(cells + [str(int(y[i]))]) + "\n")


def emit_report(report: ExperimentReport, out_dir: str) -> None:
    """report.csv (values only), timings.csv sidecar, and a readable table."""
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as f:
        f.write(REPORT_HEADER + "\n")
        for r in report.results:
            f.write(f"{r.method},{r.accuracy:.17g},{r.avg_loglik:.17g},"
                    f"{r.seed}\n")
    with open(os.path.join(out_dir, "timings.csv"), "w", newline="") as f:
        f.write(REPORT_TIMINGS_HEADER + "\n")
        for r in report.results:
            f.write(f"{r.method},{r.seconds:.3f}\n")
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(f"{'method':<8} {'accuracy':>9} {'avg_loglik':>11} "
                f"{'seconds':>8} {'seed':>5}\n")
        for r in report.results:
            f.write(f"{r.method:<8} {r.accuracy:>9.4f} {r.avg_loglik:>11.4f} "
                    f"{r.seconds:>8.1f} {r.seed:>5}\n")


def _train_config_for(config: ExperimentConfig, method: str) -> TrainConfig:
    base = config.train
    values = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    values["mode"] = method
    values["seed"] = config.seed
    return TrainConfig(**values)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.echo"), "w") as f:
        f.write("\n".join(config.echo_lines()) + "\n")
    try:
        return _run_experiment_body(config)
    except Exception as e:
        with open(os.path.join(out, "FAILED"), "w") as f:
            f.write(f"{type(e).__name__}: {e}\n")
        raise


def _run_experiment_body(config: ExperimentConfig) -> ExperimentReport:
    out = config.out_dir
    dataset = generate_two_moons(config.n, config.noise_sigma, config.seed)
    split = split_labeled(dataset, config.per_class, seed=config.seed,
                          test_fraction=config.test_fraction,
                          labeled_indices=config.labeled_indices)
    save_dataset(split, os.path.join(out, "data"))

    train_x = np.vstack([split.labeled_x, split.unlabeled_x])
    grid = GridSpec.from_data(train_x, expand=config.grid_expand,
                              resolution=config.grid_resolution)

    report = ExperimentReport()
    totals_by_method = {}
    grids = {}
    for method in config.methods:
        t0 = time.perf_counter()
        model, history = train(_train_config_for(config, method), split,
                               checkpoint_path=os.path.join(
                                   out, f"checkpoint.{method}"))
        accuracy, avg_loglik = evaluate_predictive(
            model, split.test_x, split.test_y, config.predict)
        seconds = time.perf_counter() - t0
        report.results.append(MethodResult(method, accuracy, avg_loglik,
                                           seconds, config.seed))

        save_history(history, os.path.join(out, f"history.{method}.csv"))
        save_timings(history, os.path.join(out, f"timings.{method}.csv"))
        rows = contour_grid(model, grid, config.predict)
        save_grid(os.path.join(out, f"grid.{method}.csv"), rows)
        grids[method] = rows
        if method != MODE_DNN:
            z, x, y = generate(model, config.n_samples,
                               named_rng(config.seed, f"samples.{method}"))
            save_samples(os.path.join(out, f"samples.{method}.csv"), z, x, y)
            if config.render_figures:
                figures.save_samples_figure(
                    os.path.join(out, f"fig_samples_{method}.png"),
                    x, y, train_x, f"{method} generated samples")
        if len(history):
            steps = [e.step for e in history.entries]
            totals_by_method[method] = (steps, history.totals())

    emit_report(report, out)
    if config.render_figures:
        figures.save_data_figure(os.path.join(out, "fig_data.png"), split)
        labeled = (split.labeled_x, split.labeled_y)
        for method, rows in grids.items():
            figures.save_contour_figure(
                os.path.join(out, f"fig_contour_{method}.png"), rows,
                method, labeled=labeled)
        if totals_by_method:
            figures.save_training_figure(
                os.path.join(out, "fig_training.png"), totals_by_method)
    return report
