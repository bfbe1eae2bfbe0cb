"""Generative model of 2-d inputs with a latent code and a stochastic-input
classifier, plus the two recognition networks and the mean-field posterior
over the classifier weights.

Generative story: z ~ N(0, I); x ~ N(mu(z), nu(z)) with diagonal nu;
y ~ Cat(pi(x, z)). Recognition side: q(z|x,y) and q(y|x) are RELU MLPs.
In Bayesian mode the classifier weights carry a fully factorized Gaussian
posterior and are sampled by reparameterization.

Public operations work on plain numpy vectors; the graph-building variants
(prefixed ``node_``) return tape tensors and are what the objectives and the
trainer consume.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, DimensionError, NumericError, UsageError
from .nn_core import (MlpSpec, ParameterStore, Tensor, as_tensor, concat,
                      init_mlp_params, mlp_forward, named_rng)

LOG_STD_MIN, LOG_STD_MAX = -7.0, 4.0  # also bounds the decoder's log-variance
LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_MAGIC = "ssdgm-v1"

MODE_POINT = "point"
MODE_BAYES = "bayes"


# ---------------------------------------------------------------------------
# Distribution value types
# ---------------------------------------------------------------------------

def _clamped(log_std):
    if isinstance(log_std, Tensor):
        return log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
    return np.clip(np.asarray(log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)


@dataclass
class DiagonalGaussian:
    """Mean and log-std vectors; log_std is clamped on construction.

    Fields may hold numpy arrays (value world) or tape tensors (graph
    world); every operation below works on either.
    """

    mean: object
    log_std: object

    def __post_init__(self):
        if not isinstance(self.mean, Tensor):
            self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = _clamped(self.log_std)
        m = self.mean.data if isinstance(self.mean, Tensor) else self.mean
        s = self.log_std.data if isinstance(self.log_std, Tensor) else self.log_std
        if m.shape != s.shape:
            raise DimensionError(f"mean shape {m.shape} != log_std shape {s.shape}")


@dataclass
class GaussianObservation:
    """Observation-space Gaussian: mean mu_x and diagonal log-variance."""

    mu_x: object
    log_nu_x: object

    def __post_init__(self):
        if not isinstance(self.mu_x, Tensor):
            self.mu_x = np.asarray(self.mu_x, dtype=np.float64)
        self.log_nu_x = _clamped(self.log_nu_x)
        m = self.mu_x.data if isinstance(self.mu_x, Tensor) else self.mu_x
        s = self.log_nu_x.data if isinstance(self.log_nu_x, Tensor) else self.log_nu_x
        if m.shape != s.shape:
            raise DimensionError(f"mu_x shape {m.shape} != log_nu_x shape {s.shape}")


class ClassSimplex:
    """K class probabilities summing to 1, kept alongside their logits."""

    def __init__(self, logits):
        logits = np.asarray(logits, dtype=np.float64)
        if not np.all(np.isfinite(logits)):
            raise NumericError("class logits are not finite")
        if logits.shape[-1] < 2:
            raise UsageError("a class simplex needs K >= 2")
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.logits = logits
        self.log_probs = shifted - np.log(e.sum(axis=-1, keepdims=True))
        self.probs = e / e.sum(axis=-1, keepdims=True)

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise UsageError("probabilities must be nonnegative and sum to 1")
        with np.errstate(divide="ignore"):
            out = cls.__new__(cls)
            out.probs = probs
            out.log_probs = np.log(probs)
            out.logits = out.log_probs
        return out

    def __len__(self):
        return self.probs.shape[-1]


# ---------------------------------------------------------------------------
# Weight posterior
# ---------------------------------------------------------------------------

@dataclass
class WeightPosterior:
    """Factorized Gaussian over every classifier weight entry.

    For each underlying parameter ``name`` the store carries ``name.mu``
    and ``name.log_std``; shapes mirror the point-estimate classifier.
    """

    shapes: dict
    params: ParameterStore

    @classmethod
    def init(cls, classifier_spec: MlpSpec, rng: np.random.Generator,
             init_log_std: float = -5.0) -> "WeightPosterior":
        point = init_mlp_params(classifier_spec, rng)
        store = ParameterStore()
        shapes = {}
        for name, t in point.items():
            shapes[name] = t.data.shape
            store.add(f"{name}.mu", t.data)
            store.add(f"{name}.log_std", np.full(t.data.shape, init_log_std))
        return cls(shapes=shapes, params=store)


def sample_weights(wp: WeightPosterior, rng: np.random.Generator) -> dict:
    """Reparameterized draw W = mu + exp(log_std) * eps, one eps per entry.

    Returns a dict of graph tensors keyed like the point classifier, so the
    sample is differentiable through mu and log_std.
    """
    sample = {}
    for name, shape in wp.shapes.items():
        mu = wp.params[f"{name}.mu"]
        log_std = wp.params[f"{name}.log_std"]
        eps = rng.standard_normal(shape)
        sample[name] = mu + _clamped(log_std).exp() * eps
    return sample


def node_kl_weight_posterior(wp: WeightPosterior) -> Tensor:
    """KL(q(W) || N(0, I)) summed over all weight entries, as a graph node."""
    total = None
    for name in wp.shapes:
        mu = wp.params[f"{name}.mu"]
        log_std = _clamped(wp.params[f"{name}.log_std"])
        var = (log_std * 2.0).exp()
        term = (mu.square() + var - 1.0 - log_std * 2.0).sum() * 0.5
        total = term if total is None else total + term
    return total


def kl_weight_posterior(wp: WeightPosterior) -> float:
    return node_kl_weight_posterior(wp).item()


# ---------------------------------------------------------------------------
# Density / sampling / divergence primitives
# ---------------------------------------------------------------------------

def sample_prior_z(d_z: int, rng: np.random.Generator) -> np.ndarray:
    if d_z < 1:
        raise UsageError("d_z must be >= 1")
    return rng.standard_normal(d_z)

def prior_z_logpdf(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(-0.5 * z.size * LOG_2PI - 0.5 * np.sum(np.square(z)))


def node_gaussian_obs_logpdf(x, mu: Tensor, log_nu: Tensor) -> Tensor:
    """Row-wise log N(x; mu, diag(nu)) with nu = exp(log_nu); returns (n,)."""
    x = as_tensor(x)
    d = mu.data.shape[-1]
    quad = (x - mu).square() * (-log_nu).exp()
    return (log_nu + quad).sum(axis=-1) * (-0.5) + (-0.5 * d * LOG_2PI)

def gaussian_obs_logpdf(x, obs: GaussianObservation) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != np.shape(obs.mu_x):
        raise DimensionError(f"x shape {x.shape} != mu_x shape {np.shape(obs.mu_x)}")
    node = node_gaussian_obs_logpdf(x.reshape(1, -1), as_tensor(obs.mu_x).reshape(1, -1),
                                    as_tensor(obs.log_nu_x).reshape(1, -1))
    return float(node.data[0])


def reparam_sample(dg: DiagonalGaussian, eps):
    """mean + exp(log_std) * eps; differentiable in mean and log_std."""
    eps = np.asarray(eps, dtype=np.float64)
    mean = as_tensor(dg.mean)
    log_std = as_tensor(dg.log_std)
    if eps.shape != mean.data.shape:
        raise DimensionError(f"eps shape {eps.shape} != mean shape {mean.data.shape}")
    out = mean + log_std.exp() * eps
    if isinstance(dg.mean, Tensor) or isinstance(dg.log_std, Tensor):
        return out
    return out.data


def node_kl_diag_gauss_std(mean: Tensor, log_std: Tensor) -> Tensor:
    """Closed-form KL(N(mean, exp(log_std)^2) || N(0, I)), summed coordinates.

    For batched (n, d) inputs returns per-row KL of shape (n,).
    """
    var = (log_std * 2.0).exp()
    per_coord = mean.square() + var - 1.0 - log_std * 2.0
    return per_coord.sum(axis=-1) * 0.5

def kl_diag_gauss_std(dg: DiagonalGaussian) -> float:
    node = node_kl_diag_gauss_std(as_tensor(dg.mean), as_tensor(dg.log_std))
    return float(node.data.sum())


def entropy_cat(s: ClassSimplex) -> float:
    """-sum p log p with 0 log 0 = 0; lands in [0, ln K]."""
    p = s.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return float(-terms.sum(axis=-1))

def node_entropy_from_log_softmax(log_q: Tensor) -> Tensor:
    """Row-wise entropy from log-softmax output; probabilities that
    underflow to exactly zero contribute zero."""
    p = log_q.exp()
    return -(p * log_q).sum(axis=-1)


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------

@dataclass
class GenerativeModel:
    """All four networks plus dimensions and the weight-uncertainty mode.

    The decoder is one shared RELU trunk with linear heads for the
    observation mean and log-variance. The classifier consumes x
    concatenated with z; the z-recognition net consumes x concatenated with
    a one-hot label; the y-recognition net consumes x alone.
    """

    d_x: int
    d_z: int
    n_classes: int
    mode: str
    decoder_spec: MlpSpec
    decoder: ParameterStore
    classifier_spec: MlpSpec
    encoder_spec: MlpSpec
    encoder: ParameterStore
    recog_y_spec: MlpSpec
    recog_y: ParameterStore
    classifier: ParameterStore | None = None      # point mode
    weight_posterior: WeightPosterior | None = None  # bayes mode

    def trainable_params(self) -> ParameterStore:
        groups = [("dec", self.decoder), ("enc", self.encoder), ("qy", self.recog_y)]
        if self.mode == MODE_POINT:
            groups.append(("clf", self.classifier))
        else:
            groups.append(("wpost", self.weight_posterior.params))
        return ParameterStore.merged(groups)

    def classifier_weights(self):
        """The point-estimate weight set, or None in Bayesian mode."""
        return self.classifier


def build_model(d_x: int, d_z: int, n_classes: int, hidden_dims=(128, 128),
                mode: str = MODE_POINT, seed: int = 0,
                init_w_log_std: float = -5.0) -> GenerativeModel:
    """Fresh model with seeded N(0, 1/fan_in) weights and zero biases."""
    if mode not in (MODE_POINT, MODE_BAYES):
        raise UsageError(f"unknown mode '{mode}'")
    if d_z < 1 or n_classes < 2 or d_x < 1:
        raise UsageError("need d_x >= 1, d_z >= 1, n_classes >= 2")
    hidden_dims = tuple(hidden_dims)
    dec_spec = MlpSpec(d_z, hidden_dims, (("mu", d_x), ("log_nu", d_x)))
    clf_spec = MlpSpec(d_x + d_z, hidden_dims, (("logits", n_classes),))
    enc_spec = MlpSpec(d_x + n_classes, hidden_dims, (("mean", d_z), ("log_std", d_z)))
    qy_spec = MlpSpec(d_x, hidden_dims, (("logits", n_classes),))

    model = GenerativeModel(
        d_x=d_x, d_z=d_z, n_classes=n_classes, mode=mode,
        decoder_spec=dec_spec,
        decoder=init_mlp_params(dec_spec, named_rng(seed, "init.decoder")),
        classifier_spec=clf_spec,
        encoder_spec=enc_spec,
        encoder=init_mlp_params(enc_spec, named_rng(seed, "init.encoder")),
        recog_y_spec=qy_spec,
        recog_y=init_mlp_params(qy_spec, named_rng(seed, "init.recog_y")),
    )
    if mode == MODE_POINT:
        model.classifier = init_mlp_params(clf_spec, named_rng(seed, "init.classifier"))
    else:
        model.weight_posterior = WeightPosterior.init(
            clf_spec, named_rng(seed, "init.classifier"), init_log_std=init_w_log_std)
    return model


# -- graph-building network evaluations (batched) --

def node_decode(model: GenerativeModel, z) -> tuple:
    """Decoder heads for a (n, d_z) batch: (mu, clamped log_nu) tensors."""
    heads = mlp_forward(model.decoder_spec, model.decoder, z)
    return heads["mu"], heads["log_nu"].clamp(LOG_STD_MIN, LOG_STD_MAX)

def node_encode(model: GenerativeModel, x, y_onehot) -> tuple:
    """q(z|x,y) heads for a batch: (mean, clamped log_std) tensors."""
    inp = concat([as_tensor(x), as_tensor(y_onehot)], axis=-1)
    heads = mlp_forward(model.encoder_spec, model.encoder, inp)
    return heads["mean"], heads["log_std"].clamp(LOG_STD_MIN, LOG_STD_MAX)

def node_classifier_logits(model: GenerativeModel, x, z, weights=None) -> Tensor:
    """p(y|x,z) logits; ``weights`` overrides the point estimate (a sampled
    weight set in Bayesian mode)."""
    if weights is None:
        if model.mode != MODE_POINT:
            raise UsageError("Bayesian mode needs an explicit weight sample")
        weights = model.classifier
    inp = concat([as_tensor(x), as_tensor(z)], axis=-1)
    return mlp_forward(model.classifier_spec, weights, inp)["logits"]

def node_recog_y_logits(model: GenerativeModel, x) -> Tensor:
    return mlp_forward(model.recog_y_spec, model.recog_y, x)["logits"]


# -- public single-point operations --

def _onehot(y: int, k: int) -> np.ndarray:
    if not (0 <= int(y) < k):
        raise UsageError(f"label {y} outside 0..{k - 1}")
    v = np.zeros(k)
    v[int(y)] = 1.0
    return v


def onehot_matrix(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise UsageError(f"labels outside 0..{k - 1}")
    m = np.zeros((y.size, k))
    m[np.arange(y.size), y] = 1.0
    return m


def decode_x(model: GenerativeModel, z) -> GaussianObservation:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.d_z,):
        raise DimensionError(f"z has shape {z.shape}, expected ({model.d_z},)")
    mu, log_nu = node_decode(model, z.reshape(1, -1))
    return GaussianObservation(mu.data[0], log_nu.data[0])


def encode_z(model: GenerativeModel, x, y_onehot) -> DiagonalGaussian:
    y_onehot = np.asarray(y_onehot, dtype=np.float64)
    if y_onehot.shape != (model.n_classes,) or not (
            np.all((y_onehot == 0) | (y_onehot == 1)) and y_onehot.sum() == 1):
        raise UsageError("y_onehot must contain exactly one 1")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    mean, log_std = node_encode(model, x, y_onehot.reshape(1, -1))
    return DiagonalGaussian(mean.data[0], log_std.data[0])


def classify_y(model: GenerativeModel, x, z, weights=None) -> ClassSimplex:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    logits = node_classifier_logits(model, x, z, weights)
    return ClassSimplex(logits.data[0])


def classify_q_y(model: GenerativeModel, x) -> ClassSimplex:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return ClassSimplex(node_recog_y_logits(model, x).data[0])


def generate(model: GenerativeModel, n: int, rng: np.random.Generator):
    """Ancestral samples: returns (z, x, y) arrays of length n.

    In Bayesian mode every generated point gets a fresh classifier weight
    sample.
    """
    z = rng.standard_normal((n, model.d_z))
    xs = np.zeros((n, model.d_x))
    ys = np.zeros(n, dtype=np.int64)
    if n == 0:
        return z, xs, ys
    mu, log_nu = node_decode(model, z)
    std = np.exp(0.5 * log_nu.data)
    xs = mu.data + std * rng.standard_normal((n, model.d_x))
    if model.mode == MODE_POINT:
        logits = node_classifier_logits(model, xs, z).data
        probs = ClassSimplex(logits).probs
        for i in range(n):
            ys[i] = rng.choice(model.n_classes, p=probs[i])
    else:
        for i in range(n):
            w = sample_weights(model.weight_posterior, rng)
            logits = node_classifier_logits(model, xs[i:i + 1], z[i:i + 1], w).data[0]
            ys[i] = rng.choice(model.n_classes, p=ClassSimplex(logits).probs)
    return z, xs, ys


# ---------------------------------------------------------------------------
# Baseline classifier
# ---------------------------------------------------------------------------

@dataclass
class BaselineModel:
    """Plain feed-forward classifier trained on labeled data only."""

    d_x: int
    n_classes: int
    spec: MlpSpec
    params: ParameterStore

    def trainable_params(self) -> ParameterStore:
        return ParameterStore.merged([("net", self.params)])


def build_baseline(d_x: int, n_classes: int, hidden_dims=(128, 128),
                   seed: int = 0) -> BaselineModel:
    spec = MlpSpec(d_x, tuple(hidden_dims), (("logits", n_classes),))
    params = init_mlp_params(spec, named_rng(seed, "init.baseline"))
    return BaselineModel(d_x=d_x, n_classes=n_classes, spec=spec, params=params)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout: magic line, 8-byte big-endian JSON length, JSON metadata (dims,
# mode, ordered array table), then raw little-endian float64 buffers. The
# format round-trips bit-exactly and contains no timestamps, so identical
# models produce identical files.

def _collect_arrays(model) -> tuple[dict, dict]:
    if isinstance(model, BaselineModel):
        meta = {"kind": "baseline", "d_x": model.d_x, "n_classes": model.n_classes,
                "hidden_dims": list(model.spec.hidden_dims)}
        arrays = {f"net.{k}": t.data for k, t in model.params.items()}
        return meta, arrays
    meta = {"kind": "generative", "mode": model.mode, "d_x": model.d_x,
            "d_z": model.d_z, "n_classes": model.n_classes,
            "hidden_dims": list(model.decoder_spec.hidden_dims)}
    arrays = {}
    for prefix, store in (("dec", model.decoder), ("enc", model.encoder),
                          ("qy", model.recog_y)):
        for k, t in store.items():
            arrays[f"{prefix}.{k}"] = t.data
    if model.mode == MODE_POINT:
        for k, t in model.classifier.items():
            arrays[f"clf.{k}"] = t.data
    else:
        for k, t in model.weight_posterior.params.items():
            arrays[f"wpost.{k}"] = t.data
    return meta, arrays


def save_checkpoint(model, path) -> None:
    meta, arrays = _collect_arrays(model)
    table = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC.encode() + b"\n")
        f.write(struct.pack(">Q", len(header)))
        f.write(header)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild the exact model stored by :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        magic = f.readline().strip().decode(errors="replace")
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"not a {CHECKPOINT_MAGIC} checkpoint: {path}")
        (hlen,) = struct.unpack(">Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    meta = header["meta"]
    if meta["kind"] == "baseline":
        model = build_baseline(meta["d_x"], meta["n_classes"], meta["hidden_dims"])
        for k, t in model.params.items():
            t.data = arrays[f"net.{k}"]
        return model
    model = build_model(meta["d_x"], meta["d_z"], meta["n_classes"],
                        meta["hidden_dims"], mode=meta["mode"])
    stores = {"dec": model.decoder, "enc": model.encoder, "qy": model.recog_y}
    if model.mode == MODE_POINT:
        stores["clf"] = model.classifier
    else:
        stores["wpost"] = model.weight_posterior.params
    for full, arr in arrays.items():
        prefix, name = full.split(".", 1)
        stores[prefix][name].data = arr
    return model
