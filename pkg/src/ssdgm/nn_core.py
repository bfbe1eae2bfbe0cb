"""Dense numeric kernel: MLP forward evaluation, tape-based reverse-mode
gradients, a central-difference oracle, and the Adam update rule.

Everything runs on float64 numpy arrays. A :class:`Tensor` is one node of a
recorded computation; arithmetic on tensors builds the tape implicitly
through parent links, and :func:`backward` replays it in reverse topological
order. The op set is deliberately small (affine, RELU, exp/log/square,
reductions, concat, clamp, max-shifted log-softmax) but closes over every
objective in this package. Sampling noise always enters as a constant
array, so gradients flow through distribution parameters only.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, UsageError


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible RNG stream derived from a master seed.

    Streams are keyed by name so that adding a consumer never shifts the
    draws of another.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tensor:
    """One node of a recorded computation.

    Leaf tensors with ``requires_grad=True`` are trainable parameters;
    everything else is either a constant input or an intermediate value.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- graph construction helpers --

    def _child(self, data, parents, backward):
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        return out

    def _accum(self, g):
        # copy on first touch: g may alias a buffer the caller reuses
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    # -- arithmetic --

    def __add__(self, other):
        other = as_tensor(other)
        def bw(out):
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad, other.data.shape))
        return self._child(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(out):
            if self.requires_grad:
                self._accum(-out.grad)
        return self._child(-self.data, (self,), bw)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        def bw(out):
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad * self.data, other.data.shape))
        return self._child(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, divisor):
        if isinstance(divisor, Tensor):
            raise UsageError("tensor-by-tensor division is outside the op set; "
                             "multiply by exp(-log denominator) instead")
        return self * (1.0 / np.asarray(divisor, dtype=np.float64))

    def __matmul__(self, other):
        other = as_tensor(other)
        def bw(out):
            if self.requires_grad:
                self._accum(out.grad @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ out.grad)
        return self._child(self.data @ other.data, (self, other), bw)

    # -- elementwise --

    def relu(self):
        mask = self.data > 0.0  # subgradient at 0 is 0
        def bw(out):
            if self.requires_grad:
                self._accum(out.grad * mask)
        return self._child(np.where(mask, self.data, 0.0), (self,), bw)

    def exp(self):
        e = np.exp(self.data)
        def bw(out):
            if self.requires_grad:
                self._accum(out.grad * e)
        return self._child(e, (self,), bw)

    def log(self):
        def bw(out):
            if self.requires_grad:
                self._accum(out.grad / self.data)
        with np.errstate(invalid="ignore", divide="ignore"):
            value = np.log(self.data)  # non-finite results surface in backward()
        return self._child(value, (self,), bw)

    def square(self):
        def bw(out):
            if self.requires_grad:
                self._accum(out.grad * (2.0 * self.data))
        with np.errstate(over="ignore"):
            value = np.square(self.data)  # inf is caught by the objective's finite check
        return self._child(value, (self,), bw)

    def clamp(self, lo: float, hi: float):
        """Clip to [lo, hi]; gradient passes only where the input lies inside."""
        mask = (self.data >= lo) & (self.data <= hi)
        def bw(out):
            if self.requires_grad:
                self._accum(out.grad * mask)
        return self._child(np.clip(self.data, lo, hi), (self,), bw)

    # -- reductions and shaping --

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.data.shape
        def bw(out):
            if self.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis=axis)
                self._accum(np.broadcast_to(g, shape))
        return self._child(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        denom = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / denom

    def reshape(self, *shape):
        old = self.data.shape
        def bw(out):
            if self.requires_grad:
                self._accum(out.grad.reshape(old))
        return self._child(self.data.reshape(*shape), (self,), bw)

    def item(self) -> float:
        return float(self.data)


def as_tensor(x) -> Tensor:
    """Wrap scalars/arrays as constant tensors; tensors pass through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along an axis; the gradient splits back per input."""
    tensors = [as_tensor(t) for t in tensors]
    widths = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)
    def bw(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t._accum(out.grad[tuple(idx)])
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in tensors)
    if out.requires_grad:
        out._parents = tuple(tensors)
        out._backward = bw
    return out


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Fused x @ W + b for a 2-D batch: one graph node instead of two."""
    def bw(out):
        g = out.grad
        if x.requires_grad:
            x._accum(g @ W.data.T)
        if W.requires_grad:
            W._accum(x.data.T @ g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))
    data = x.data @ W.data + b.data
    out = Tensor(data)
    out.requires_grad = x.requires_grad or W.requires_grad or b.requires_grad
    if out.requires_grad:
        out._parents = (x, W, b)
        out._backward = bw
    return out


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax via a constant max shift, fused into
    one node with the analytic backward g - softmax * sum(g)."""
    t = as_tensor(t)
    shift = np.max(t.data, axis=axis, keepdims=True)
    s = t.data - shift
    data = s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))
    def bw(out):
        if t.requires_grad:
            g = out.grad
            t._accum(g - np.exp(data) * g.sum(axis=axis, keepdims=True))
    out = Tensor(data)
    out.requires_grad = t.requires_grad
    if out.requires_grad:
        out._parents = (t,)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParameterStore:
    """Ordered map from name to trainable tensor.

    Iteration order is insertion order and therefore deterministic; names
    are unique. Stores can be merged under prefixes while sharing the
    underlying tensors, which is how a model exposes one flat view of its
    sub-networks to the optimizer and the checkpoint writer.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._entries:
            raise UsageError(f"duplicate parameter name '{name}'")
        arr = np.array(array, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter '{name}' contains non-finite values")
        t = Tensor(arr, requires_grad=True)
        self._entries[name] = t
        return t

    def add_tensor(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise UsageError(f"duplicate parameter name '{name}'")
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise UsageError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    @classmethod
    def merged(cls, groups) -> "ParameterStore":
        """Flat view over (prefix, store) pairs; tensors are shared, not copied."""
        out = cls()
        for prefix, store in groups:
            for name, tensor in store.items():
                out.add_tensor(f"{prefix}.{name}", tensor)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._entries.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, arr in snap.items():
            self._entries[name].data = arr.copy()

    def check_finite(self, context: str = "") -> None:
        for name, t in self._entries.items():
            if not np.all(np.isfinite(t.data)):
                where = f" after {context}" if context else ""
                raise NumericError(f"parameter '{name}' became non-finite{where}")


GradientStore = dict  # name -> np.ndarray, same keys/shapes as the ParameterStore


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a dense RELU network with one or more linear heads."""

    input_dim: int
    hidden_dims: tuple
    output_heads: tuple  # of (name, dim)
    hidden_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        object.__setattr__(self, "output_heads", tuple(self.output_heads))
        if self.input_dim < 1:
            raise UsageError("input_dim must be positive")
        if any(d < 1 for d in self.hidden_dims):
            raise UsageError("hidden dims must be positive")
        if any(dim < 1 for _, dim in self.output_heads):
            raise UsageError("every head dim must be >= 1")
        if self.hidden_activation != "relu":
            raise UsageError(f"unsupported activation '{self.hidden_activation}'")


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator) -> ParameterStore:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    params = ParameterStore()
    fan_in = spec.input_dim
    for i, width in enumerate(spec.hidden_dims):
        params.add(f"h{i}.W", rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, width)))
        params.add(f"h{i}.b", np.zeros(width))
        fan_in = width
    for name, dim in spec.output_heads:
        params.add(f"{name}.W", rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, dim)))
        params.add(f"{name}.b", np.zeros(dim))
    return params


def mlp_forward(spec: MlpSpec, params, x) -> dict:
    """Evaluate the network, returning one tensor per named head.

    ``params`` is anything mapping layer names to tensors (a ParameterStore
    or a plain dict, e.g. a sampled weight set). Accepts a single vector or
    a (batch, input_dim) matrix; head outputs mirror the input's ndim.
    """
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    single = t.data.ndim == 1
    if single:
        t = t.reshape(1, -1)
    if t.data.ndim != 2 or t.data.shape[1] != spec.input_dim:
        raise DimensionError(
            f"input has shape {np.asarray(x).shape}, expected (*, {spec.input_dim})")
    h = t
    fan_in = spec.input_dim
    for i, width in enumerate(spec.hidden_dims):
        W, b = params[f"h{i}.W"], params[f"h{i}.b"]
        if W.data.shape != (fan_in, width):
            raise DimensionError(
                f"layer h{i}: weight shape {W.data.shape}, expected {(fan_in, width)}")
        h = affine(h, W, b).relu()
        fan_in = width
    outs = {}
    for name, dim in spec.output_heads:
        W, b = params[f"{name}.W"], params[f"{name}.b"]
        if W.data.shape != (fan_in, dim):
            raise DimensionError(
                f"head {name}: weight shape {W.data.shape}, expected {(fan_in, dim)}")
        o = affine(h, W, b)
        outs[name] = o.reshape(-1) if single else o
    return outs


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: ParameterStore) -> GradientStore:
    """Gradient of a recorded scalar loss w.r.t. every entry of ``params``.

    Parameters that did not participate in the computation get zero
    gradients. Raises a numeric error naming the parameter if any gradient
    comes out non-finite.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise NumericError("loss is not finite")

    # Iterative post-order walk: parents are appended before their children.
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)

    grads: GradientStore = {}
    for name, p in params.items():
        if id(p) in visited and p.grad is not None:
            g = p.grad
        else:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        grads[name] = g
    return grads


def finite_diff_gradient(loss_fn, params: ParameterStore, eps: float = 1e-5) -> GradientStore:
    """Central-difference gradient oracle: (f(p+eps) - f(p-eps)) / (2 eps).

    ``loss_fn`` takes the store and returns a float; it must be
    deterministic (freeze any sampling noise before calling).
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    grads: GradientStore = {}
    for name, p in params.items():
        arr = p.data
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            f_plus = float(loss_fn(params))
            arr[idx] = orig - eps
            f_minus = float(loss_fn(params))
            arr[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while probing '{name}'{idx}")
            g[idx] = (f_plus - f_minus) / (2.0 * eps)
            it.iternext()
        grads[name] = g
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Step count, first/second moment accumulators, and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise UsageError("betas must lie in (0, 1)")
    if lr < 0.0 or eps <= 0.0:  # lr 0 is a valid no-op configuration
        raise UsageError("lr must be >= 0 and eps positive")
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_update(params: ParameterStore, grads: GradientStore, state: AdamState) -> None:
    """One bias-corrected Adam step, in place on the parameter values."""
    if set(grads) != set(params.names()):
        missing = set(params.names()) ^ set(grads)
        raise UsageError(f"gradient keys do not match parameters: {sorted(missing)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
