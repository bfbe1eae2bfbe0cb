"""Predictive distributions.

For the generative models the label posterior at a new point is
approximated by Gibbs sampling: each chain starts from y ~ q(y|x), then
alternates z ~ q(z|x, y) (with a fresh classifier weight sample per step in
Bayesian mode) and y ~ Cat(pi(x, z)). Every step's pi vector enters the
final average; nothing is discarded. The average is a Welford running mean,
which is exactly invariant in T and S when every pi is identical.

The default averages probability vectors; ``average="labels"`` instead
averages the sampled one-hot labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UsageError
from .model import (BaselineModel, ClassSimplex, GenerativeModel, MODE_BAYES,
                    node_classifier_logits, node_encode, node_recog_y_logits,
                    onehot_matrix, sample_weights)
from .nn_core import mlp_forward, named_rng

AVERAGE_PROBS, AVERAGE_LABELS = "probs", "labels"


@dataclass
class PredictConfig:
    gibbs_steps: int = 10
    chains: int = 10
    seed: int = 0
    average: str = AVERAGE_PROBS

    def __post_init__(self):
        if self.gibbs_steps < 1 or self.chains < 1:
            raise UsageError("gibbs_steps and chains must be >= 1")
        if self.average not in (AVERAGE_PROBS, AVERAGE_LABELS):
            raise UsageError(f"average must be '{AVERAGE_PROBS}' or "
                             f"'{AVERAGE_LABELS}'")


@dataclass
class PredictiveResult:
    probs: ClassSimplex
    trace: np.ndarray | None = None  # (chains, steps, K) when retained


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericError("classifier produced non-finite logits")
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _sample_categorical_rows(probs: np.ndarray, rng) -> np.ndarray:
    u = rng.random((probs.shape[0], 1))
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


def _qy_probs(model: GenerativeModel, x: np.ndarray) -> np.ndarray:
    return _softmax_rows(node_recog_y_logits(model, x).data)


def _encode_values(model: GenerativeModel, x, onehot) -> tuple:
    mean, log_std = node_encode(model, x, onehot)
    return mean.data, log_std.data


def _classifier_probs(model: GenerativeModel, x, z, weights) -> np.ndarray:
    return _softmax_rows(node_classifier_logits(model, x, z, weights).data)


def _gibbs_sweep(model: GenerativeModel, x: np.ndarray, cfg: PredictConfig,
                 collect_trace: bool) -> tuple:
    """Core sampler over an (n, d_x) batch.

    Chains run sequentially; within a chain each step is vectorized over
    points. In Bayesian mode one weight sample per (chain, step) is shared
    across points, which leaves every single point's chain law unchanged.
    Returns (mean probs (n, K), per-chain means (S, n, K), trace or None).
    """
    n = x.shape[0]
    K = model.n_classes
    chain_means = np.zeros((cfg.chains, n, K))
    mean = np.zeros((n, K))
    trace = np.zeros((cfg.chains, cfg.gibbs_steps, n, K)) if collect_trace else None
    count = 0
    for s in range(cfg.chains):
        rng = named_rng(cfg.seed, f"gibbs.chain{s}")
        y = _sample_categorical_rows(_qy_probs(model, x), rng)
        chain_mean = np.zeros((n, K))
        for t in range(cfg.gibbs_steps):
            weights = None
            if model.mode == MODE_BAYES:
                weights = sample_weights(model.weight_posterior, rng)
            mu, log_std = _encode_values(model, x, onehot_matrix(y, K))
            z = mu + np.exp(log_std) * rng.standard_normal((n, model.d_z))
            pi = _classifier_probs(model, x, z, weights)
            y = _sample_categorical_rows(pi, rng)
            value = onehot_matrix(y, K) if cfg.average == AVERAGE_LABELS else pi
            count += 1
            mean += (value - mean) / count
            chain_mean += (value - chain_mean) / (t + 1)
            if collect_trace:
                trace[s, t] = value
        chain_means[s] = chain_mean
    return mean, chain_means, trace


def gibbs_predict(model: GenerativeModel, x_star, cfg: PredictConfig,
                  retain_trace: bool = False) -> PredictiveResult:
    """Predictive class distribution at one point."""
    x = np.asarray(x_star, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise NumericError("prediction input is not finite")
    mean, _, trace = _gibbs_sweep(model, x, cfg, retain_trace)
    return PredictiveResult(
        probs=ClassSimplex.from_probs(mean[0]),
        trace=trace[:, :, 0, :] if trace is not None else None)


def predict_proba(model: GenerativeModel, x, cfg: PredictConfig,
                  per_chain: bool = False):
    """Batched predictive probabilities, shape (n, K); optionally also the
    per-chain means (chains, n, K) for uncertainty summaries."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise NumericError("prediction input is not finite")
    mean, chain_means, _ = _gibbs_sweep(model, x, cfg, collect_trace=False)
    return (mean, chain_means) if per_chain else mean


def predict_dnn(baseline: BaselineModel, x) -> ClassSimplex:
    """Class distribution at one point: a forward pass plus softmax."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    logits = mlp_forward(baseline.spec, baseline.params, x)["logits"]
    return ClassSimplex(logits.data[0])


def predict_dnn_proba(baseline: BaselineModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    return _softmax_rows(mlp_forward(baseline.spec, baseline.params, x)["logits"].data)


PROB_FLOOR = 1e-12


def evaluate_predictive(model, test_x, test_y, cfg: PredictConfig) -> tuple:
    """(accuracy, mean log-likelihood) on a labeled test set.

    argmax ties resolve to the lowest class index; probabilities are floored
    at 1e-12 before the log.
    """
    test_x = np.asarray(test_x, dtype=np.float64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if test_x.shape[0] == 0:
        raise UsageError("empty test set")
    if isinstance(model, BaselineModel):
        probs = predict_dnn_proba(model, test_x)
    else:
        probs = predict_proba(model, test_x, cfg)
    accuracy = float(np.mean(np.argmax(probs, axis=1) == test_y))
    picked = np.maximum(probs[np.arange(test_y.size), test_y], PROB_FLOOR)
    avg_loglik = float(np.mean(np.log(picked)))
    return accuracy, avg_loglik
