"""Minibatched training loops for the three systems: the labeled-only
baseline classifier (dnn), the semi-supervised generative model with a
point-estimate classifier (sslpe), and its Bayesian-classifier variant
(sslapd).

Determinism contract: (seed, config, data) fully determine every minibatch
draw, every noise draw, and therefore the trained parameters and history.
Named RNG streams keep batching noise independent of objective noise.

Per-step wall-clock times are kept in the in-memory history and written to
a separate timings file, never into history.csv, so history files from
seed-fixed reruns are byte-identical.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetSplit
from .errors import NumericError, UsageError
from .model import (BaselineModel, GenerativeModel, MODE_BAYES, MODE_POINT,
                    build_baseline, build_model, save_checkpoint)
from .nn_core import adam_init, adam_update, backward, named_rng
from .objective import (ElboTerms, ObjectiveConfig, baseline_cross_entropy,
                        combined_objective)

MODE_DNN, MODE_SSLPE, MODE_SSLAPD = "dnn", "sslpe", "sslapd"
MODES = (MODE_DNN, MODE_SSLPE, MODE_SSLAPD)


@dataclass
class TrainConfig:
    mode: str = MODE_SSLPE
    epochs: int = 300
    labeled_batch: int = 100
    unlabeled_batch: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hidden_dims: tuple = (128, 128)
    d_z: int = 5
    n_classes: int = 2
    alpha: float | None = None  # None resolves to 0.1 * N_l at train time
    mc_samples: int = 1
    log_every: int = 50
    # the labeled set is tiny, so epoch counting alone would stop the
    # baseline after a handful of steps; this floors its total step count
    dnn_steps: int = 1000
    init_w_log_std: float = -5.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise UsageError("batch sizes must be >= 1")
        if self.log_every < 1:
            raise UsageError("log_every must be >= 1")
        if self.alpha is not None and self.alpha < 0:
            raise UsageError("alpha must be nonnegative")
        if self.dnn_steps < 0:
            raise UsageError("dnn_steps must be >= 0")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)


@dataclass
class HistoryEntry:
    step: int
    terms: ElboTerms
    ms: float


@dataclass
class TrainHistory:
    entries: list = field(default_factory=list)

    def append(self, step: int, terms: ElboTerms, ms: float) -> None:
        if self.entries and step <= self.entries[-1].step:
            raise UsageError("history steps must be strictly increasing")
        # keep values only: holding the graph root would retain every
        # step's computation graph for the whole run
        if terms.node is not None:
            terms = replace(terms, node=None)
        self.entries.append(HistoryEntry(step, terms, ms))

    def totals(self) -> np.ndarray:
        return np.array([e.terms.total for e in self.entries])

    def __len__(self):
        return len(self.entries)


HISTORY_HEADER = "step,total,recon_x,recon_y,kl_z,entropy_y,kl_w,alpha_term"
TIMINGS_HEADER = "step,ms"


def save_history(history: TrainHistory, path: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(HISTORY_HEADER + "\n")
        for e in history.entries:
            t = e.terms
            cells = [str(e.step)] + [f"{v:.17g}" for v in (
                t.total, t.recon_x, t.recon_y, t.kl_z, t.entropy_y,
                t.kl_w, t.alpha_term)]
            f.write(",".join(cells) + "\n")


def save_timings(history: TrainHistory, path: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(TIMINGS_HEADER + "\n")
        for e in history.entries:
            f.write(f"{e.step},{e.ms:.3f}\n")


def resolve_alpha(config: TrainConfig, n_labeled: int) -> float:
    return 0.1 * n_labeled if config.alpha is None else config.alpha


def _run_steps(params, state, total_steps, one_step, log_every, checkpoint,
               model):
    """Shared optimizer loop: per-step objective + Adam update, periodic
    finite checks, last-good rollback on numeric failure."""
    history = TrainHistory()
    last_good = params.snapshot()
    for step in range(1, total_steps + 1):
        t0 = time.perf_counter()
        try:
            terms = one_step(step)
            grads = backward(terms.node * -1.0, params)
            adam_update(params, grads, state)
            if step % log_every == 0 or step == total_steps:
                params.check_finite(f"parameters after step {step}")
        except NumericError as e:
            params.restore(last_good)
            if checkpoint is not None:
                save_checkpoint(model, checkpoint)
            raise NumericError(f"training aborted at step {step}: {e}") from e
        ms = (time.perf_counter() - t0) * 1000.0
        history.append(step, terms, ms)
        if step % log_every == 0 or step == total_steps:
            last_good = params.snapshot()
    return history


def train(config: TrainConfig, split: DatasetSplit, checkpoint_path=None):
    """Train the configured system on a split; returns (model, history).

    dnn mode ignores the unlabeled pool entirely. The generative modes draw
    one labeled and one unlabeled minibatch per step, cycling through the
    unlabeled pool once per epoch in a seeded shuffled order.
    """
    if config.mode == MODE_DNN:
        return train_dnn_baseline(config, (split.labeled_x, split.labeled_y),
                                  checkpoint_path=checkpoint_path)

    n_labeled = split.labeled_x.shape[0]
    if n_labeled == 0:
        raise UsageError("empty labeled set")
    n_unlabeled = split.unlabeled_x.shape[0]

    model = build_model(
        d_x=split.labeled_x.shape[1], d_z=config.d_z,
        n_classes=config.n_classes, hidden_dims=config.hidden_dims,
        mode=MODE_BAYES if config.mode == MODE_SSLAPD else MODE_POINT,
        seed=config.seed, init_w_log_std=config.init_w_log_std)
    params = model.trainable_params()
    state = adam_init(params, lr=config.lr, beta1=config.beta1,
                      beta2=config.beta2, eps=config.adam_eps)

    lab_size = min(n_labeled, config.labeled_batch)
    unl_size = min(n_unlabeled, config.unlabeled_batch)
    steps_per_epoch = max(1, math.ceil(n_unlabeled / unl_size)) if n_unlabeled else 1
    total_steps = config.epochs * steps_per_epoch

    alpha = resolve_alpha(config, n_labeled)
    batch_rng = named_rng(config.seed, "train.batch")
    noise_rng = named_rng(config.seed, "train.noise")

    epoch_order = {"perm": None}

    def one_step(step):
        i = (step - 1) % steps_per_epoch
        if i == 0 and n_unlabeled:
            epoch_order["perm"] = batch_rng.permutation(n_unlabeled)
        lab_idx = batch_rng.choice(n_labeled, size=lab_size, replace=False)
        labeled = (split.labeled_x[lab_idx], split.labeled_y[lab_idx])
        unlabeled = None
        n_u = 0
        if n_unlabeled:
            chunk = epoch_order["perm"][i * unl_size:(i + 1) * unl_size]
            unlabeled = split.unlabeled_x[chunk]
            n_u = chunk.size
        cfg = ObjectiveConfig(
            mc_samples=config.mc_samples, alpha=alpha,
            kl_w_scale=(lab_size + n_u) / (n_labeled + n_unlabeled))
        return combined_objective(model, labeled, unlabeled, cfg, noise_rng)

    history = _run_steps(params, state, total_steps, one_step,
                         config.log_every, checkpoint_path, model)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, history


def train_dnn_baseline(config: TrainConfig, labeled, checkpoint_path=None):
    """Cross-entropy training of the plain classifier on labeled data only.

    Runs epochs passes over the labeled set, floored at config.dnn_steps
    total steps; epochs=0 returns the initialized model untouched.
    """
    x, y = labeled
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise UsageError("empty labeled set")
    if np.unique(y).size < 2:
        raise UsageError("baseline needs at least two classes in the labeled set")

    model = build_baseline(x.shape[1], config.n_classes, config.hidden_dims,
                           seed=config.seed)
    params = model.trainable_params()
    state = adam_init(params, lr=config.lr, beta1=config.beta1,
                      beta2=config.beta2, eps=config.adam_eps)

    n = x.shape[0]
    size = min(n, config.labeled_batch)
    steps_per_epoch = max(1, math.ceil(n / size))
    total_steps = config.epochs * steps_per_epoch
    if config.epochs > 0:
        total_steps = max(total_steps, config.dnn_steps)
    batch_rng = named_rng(config.seed, "train.batch")

    def one_step(step):
        idx = batch_rng.choice(n, size=size, replace=False)
        return baseline_cross_entropy(model, x[idx], y[idx])

    history = _run_steps(params, state, total_steps, one_step,
                         config.log_every, checkpoint_path, model)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, history
