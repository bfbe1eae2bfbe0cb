"""Training objectives.

Four lower bounds and their combination:

- labeled bound: E_q(z|x,y)[log p(x|z) + log p(y|x,z)] - KL(q(z|x,y) || p(z)),
  the expectation estimated with ``mc_samples`` reparameterized draws and the
  KL evaluated in closed form;
- unlabeled bound: the labeled integrand marginalized over y by an explicit
  weighted sum over all classes (never sampled), plus the entropy of q(y|x);
- Bayesian variants: the same bounds evaluated at a sampled classifier
  weight set, with the weight-space KL charged once per minibatch scaled by
  ``kl_w_scale``;
- combined objective: sum of labeled bounds + sum of unlabeled bounds +
  alpha * (mean labeled log q(y|x)).

Every operation returns ElboTerms carrying both float components and the
graph node of the total, so the trainer can run backward() on it. The
caller's rng supplies all noise; draw order is fixed and documented on each
operation, which makes seeded evaluations reproducible and lets tests freeze
noise by re-seeding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, UsageError
from .model import (GenerativeModel, MODE_BAYES, node_classifier_logits,
                    node_decode, node_encode, node_entropy_from_log_softmax,
                    node_gaussian_obs_logpdf, node_kl_diag_gauss_std,
                    node_kl_weight_posterior, node_recog_y_logits,
                    onehot_matrix, sample_weights)
from .nn_core import Tensor, log_softmax, mlp_forward


@dataclass
class ObjectiveConfig:
    mc_samples: int = 1
    alpha: float = 0.0
    kl_w_scale: float = 1.0

    def __post_init__(self):
        if self.mc_samples < 1:
            raise UsageError("mc_samples must be >= 1")
        if self.alpha < 0:
            raise UsageError("alpha must be nonnegative")
        if self.kl_w_scale <= 0:
            raise UsageError("kl_w_scale must be positive")


@dataclass
class ElboTerms:
    """Objective value and its additive components.

    total = recon_x + recon_y - kl_z + entropy_y - kl_w + alpha_term, exact
    by construction; kl_z and kl_w hold the positive divergences being
    subtracted, kl_w already carrying its minibatch scale. node is the graph
    root for backward().
    """

    total: float
    recon_x: float
    recon_y: float
    kl_z: float
    entropy_y: float = 0.0
    kl_w: float = 0.0
    alpha_term: float = 0.0
    node: Tensor | None = field(default=None, repr=False, compare=False)


def _finish(context: str, node: Tensor, recon_x: float, recon_y: float,
            kl_z: float, entropy_y: float = 0.0, kl_w: float = 0.0,
            alpha_term: float = 0.0) -> ElboTerms:
    total = recon_x + recon_y - kl_z + entropy_y - kl_w + alpha_term
    if not np.isfinite(total):
        raise NumericError(
            f"{context} is not finite: recon_x={recon_x} recon_y={recon_y} "
            f"kl_z={kl_z} entropy_y={entropy_y} kl_w={kl_w} "
            f"alpha_term={alpha_term}")
    return ElboTerms(total=total, recon_x=recon_x, recon_y=recon_y,
                     kl_z=kl_z, entropy_y=entropy_y, kl_w=kl_w,
                     alpha_term=alpha_term, node=node)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    return x


def _as_labels(y) -> np.ndarray:
    return np.atleast_1d(np.asarray(y, dtype=np.int64))


def _labeled_branch(model: GenerativeModel, x: np.ndarray, y_onehot: np.ndarray,
                    eps: np.ndarray, weights) -> tuple:
    """Per-point bound pieces for one fixed label assignment.

    Returns graph nodes (logpx, logpy, kl), each of shape (n,); logpx and
    logpy are already averaged over the leading mc_samples axis of eps.
    """
    mean, log_std = node_encode(model, x, y_onehot)
    kl = node_kl_diag_gauss_std(mean, log_std)
    L = eps.shape[0]
    logpx = None
    logpy = None
    for l in range(L):
        z = mean + log_std.exp() * eps[l]
        mu, log_nu = node_decode(model, z)
        px = node_gaussian_obs_logpdf(x, mu, log_nu)
        logits = node_classifier_logits(model, x, z, weights)
        log_q = log_softmax(logits)
        py = (log_q * y_onehot).sum(axis=-1)
        logpx = px if logpx is None else logpx + px
        logpy = py if logpy is None else logpy + py
    if L > 1:
        logpx = logpx * (1.0 / L)
        logpy = logpy * (1.0 / L)
    return logpx, logpy, kl


def pointwise_labeled_terms(model: GenerativeModel, x, y, cfg: ObjectiveConfig,
                            rng: np.random.Generator, weights=None) -> tuple:
    """Per-point (log p(x|z), log p(y|x,z), KL) value arrays, each (n,).

    Rows are independent given independent noise, so replicating one point n
    times yields n iid estimates of its bound.
    """
    x = _as_batch(x)
    y = _as_labels(y)
    onehot = onehot_matrix(y, model.n_classes)
    eps = rng.standard_normal((cfg.mc_samples, x.shape[0], model.d_z))
    logpx, logpy, kl = _labeled_branch(model, x, onehot, eps, weights)
    return logpx.data.copy(), logpy.data.copy(), kl.data.copy()


def labeled_elbo(model: GenerativeModel, x, y, cfg: ObjectiveConfig,
                 rng: np.random.Generator, weights=None) -> ElboTerms:
    """Labeled bound summed over the batch.

    Noise order: one (mc_samples, n, d_z) standard-normal block from rng.
    """
    x = _as_batch(x)
    y = _as_labels(y)
    onehot = onehot_matrix(y, model.n_classes)
    eps = rng.standard_normal((cfg.mc_samples, x.shape[0], model.d_z))
    logpx, logpy, kl = _labeled_branch(model, x, onehot, eps, weights)
    rx, ry, kz = logpx.sum(), logpy.sum(), kl.sum()
    node = rx + ry - kz
    return _finish("labeled bound", node, rx.item(), ry.item(), kz.item())


def unlabeled_elbo(model: GenerativeModel, x, cfg: ObjectiveConfig,
                   rng: np.random.Generator, weights=None) -> ElboTerms:
    """Unlabeled bound summed over the batch.

    The class sum is explicit: every class branch is evaluated and weighted
    by q(y|x). One (mc_samples, n, d_z) noise block is drawn and shared
    across all branches, matching the labeled draw so a point-mass q(y|x)
    reduces this bound to the labeled one exactly.
    """
    x = _as_batch(x)
    n, K = x.shape[0], model.n_classes
    eps = rng.standard_normal((cfg.mc_samples, n, model.d_z))

    log_q = log_softmax(node_recog_y_logits(model, x))
    q = log_q.exp()

    rx = ry = kz = None
    for label in range(K):
        basis = np.zeros(K)
        basis[label] = 1.0
        onehot = np.tile(basis, (n, 1))
        logpx, logpy, kl = _labeled_branch(model, x, onehot, eps, weights)
        qy = (q * basis).sum(axis=-1)
        brx, bry, bkz = (qy * logpx).sum(), (qy * logpy).sum(), (qy * kl).sum()
        rx = brx if rx is None else rx + brx
        ry = bry if ry is None else ry + bry
        kz = bkz if kz is None else kz + bkz

    ent = node_entropy_from_log_softmax(log_q).sum()
    node = rx + ry - kz + ent
    return _finish("unlabeled bound", node, rx.item(), ry.item(), kz.item(),
                   entropy_y=ent.item())


def bayesian_labeled_elbo(model: GenerativeModel, x, y, w_sample,
                          cfg: ObjectiveConfig, rng: np.random.Generator) -> ElboTerms:
    """Labeled bound at a sampled weight set, minus the scaled weight KL."""
    if model.mode != MODE_BAYES:
        raise UsageError("bayesian bound needs a model in Bayesian mode")
    base = labeled_elbo(model, x, y, cfg, rng, weights=w_sample)
    klw = node_kl_weight_posterior(model.weight_posterior) * cfg.kl_w_scale
    node = base.node - klw
    return _finish("Bayesian labeled bound", node, base.recon_x, base.recon_y,
                   base.kl_z, kl_w=klw.item())


def bayesian_unlabeled_elbo(model: GenerativeModel, x, w_sample,
                            cfg: ObjectiveConfig, rng: np.random.Generator) -> ElboTerms:
    """Unlabeled bound at a sampled weight set.

    The weight KL is charged once per minibatch by the combined objective,
    not here, so kl_w stays 0.
    """
    if model.mode != MODE_BAYES:
        raise UsageError("bayesian bound needs a model in Bayesian mode")
    return unlabeled_elbo(model, x, cfg, rng, weights=w_sample)


def combined_objective(model: GenerativeModel, labeled_batch, unlabeled_batch,
                       cfg: ObjectiveConfig, rng: np.random.Generator) -> ElboTerms:
    """Full minibatch objective; the trainer maximizes this.

    labeled_batch is (x, y) or None; unlabeled_batch is an x matrix or None.
    Noise order: classifier weight sample first (Bayesian mode only), then
    the labeled noise block, then the unlabeled noise blocks.
    """
    x_l = y_l = None
    if labeled_batch is not None:
        x_l, y_l = labeled_batch
        x_l = _as_batch(x_l)
        y_l = _as_labels(y_l)
        if x_l.shape[0] == 0:
            x_l = y_l = None
    x_u = None
    if unlabeled_batch is not None:
        x_u = _as_batch(unlabeled_batch)
        if x_u.shape[0] == 0:
            x_u = None
    if x_l is None and x_u is None:
        raise UsageError("combined objective needs at least one non-empty batch")

    weights = None
    klw = None
    if model.mode == MODE_BAYES:
        weights = sample_weights(model.weight_posterior, rng)
        klw = node_kl_weight_posterior(model.weight_posterior) * cfg.kl_w_scale

    parts = []
    rx = ry = kz = ent = 0.0
    if x_l is not None:
        onehot = onehot_matrix(y_l, model.n_classes)
        eps = rng.standard_normal((cfg.mc_samples, x_l.shape[0], model.d_z))
        logpx, logpy, kl = _labeled_branch(model, x_l, onehot, eps, weights)
        lx, ly, lk = logpx.sum(), logpy.sum(), kl.sum()
        parts.append(lx + ly - lk)
        rx += lx.item()
        ry += ly.item()
        kz += lk.item()

    if x_u is not None:
        sub = unlabeled_elbo(model, x_u, cfg, rng, weights=weights)
        parts.append(sub.node)
        rx += sub.recon_x
        ry += sub.recon_y
        kz += sub.kl_z
        ent += sub.entropy_y

    alpha_node = None
    if x_l is not None and cfg.alpha > 0:
        log_q = log_softmax(node_recog_y_logits(model, x_l))
        onehot = onehot_matrix(y_l, model.n_classes)
        alpha_node = (log_q * onehot).sum(axis=-1).mean() * cfg.alpha

    node = parts[0]
    for p in parts[1:]:
        node = node + p
    if klw is not None:
        node = node - klw
    if alpha_node is not None:
        node = node + alpha_node
    return _finish("combined objective", node, rx, ry, kz, entropy_y=ent,
                   kl_w=klw.item() if klw is not None else 0.0,
                   alpha_term=alpha_node.item() if alpha_node is not None else 0.0)


def baseline_cross_entropy(baseline, x, y) -> ElboTerms:
    """Baseline objective: mean label log-likelihood of the plain
    classifier, i.e. the negated cross-entropy. Like every other operation
    here, node is the quantity the trainer maximizes. Deterministic; draws
    no noise."""
    x = _as_batch(x)
    y = _as_labels(y)
    if x.shape[0] == 0:
        raise UsageError("cross-entropy needs a non-empty batch")
    onehot = onehot_matrix(y, baseline.n_classes)
    log_q = log_softmax(mlp_forward(baseline.spec, baseline.params, x)["logits"])
    node = (log_q * onehot).sum(axis=-1).mean()
    return _finish("cross-entropy", node, 0.0, node.item(), 0.0)
