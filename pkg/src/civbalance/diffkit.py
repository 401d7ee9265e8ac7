"""A small reverse-mode differentiation kernel on top of numpy.

Values are float64 numpy arrays: 2-D matrices (rows are samples) for data and
activations, 1-D vectors for biases, 0-d arrays for scalar losses. Each
``Tensor`` remembers its parents and a closure that pushes its gradient back
to them, so the graph built during a forward pass is the tape.

Only row-broadcasting of a bias vector onto a matrix is supported; there is
no general broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError
from .rng import substream

PROB_EPS = 1e-6


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf reachable from a scalar."""
        if self.value.size != 1:
            raise ShapeError("backward() needs a scalar output")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.value))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.sum(g)
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_binary(a, b):
    sa, sb = a.value.shape, b.value.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return
    if len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0]:
        return
    raise ShapeError(f"incompatible shapes {sa} and {sb}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    return Tensor(a.value + b.value, parents=(a, b), backward=backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.value.shape))

    return Tensor(a.value - b.value, parents=(a, b), backward=backward)


def mul(a, b) -> Tensor:
    """Elementwise product (same shapes, bias-row broadcast, or scalar)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    return Tensor(a.value * b.value, parents=(a, b), backward=backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value * c, parents=(a,), backward=lambda g: a._accumulate(g * c))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul shapes {a.value.shape} @ {b.value.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return Tensor(a.value @ b.value, parents=(a, b), backward=backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), parents=(a,),
                  backward=lambda g: a._accumulate(g * mask))


def sigmoid(a, delta: float = PROB_EPS) -> Tensor:
    """Logistic function clamped to [delta, 1 - delta]; zero gradient where clamped."""
    a = as_tensor(a)
    x = a.value
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = np.clip(s, delta, 1.0 - delta)
    inside = (s > delta) & (s < 1.0 - delta)

    def backward(g):
        a._accumulate(g * s * (1.0 - s) * inside)

    return Tensor(out, parents=(a,), backward=backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.value), parents=(a,), backward=lambda g: a._accumulate(g / a.value))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value ** 2, parents=(a,), backward=lambda g: a._accumulate(2.0 * g * a.value))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.sum(a.value), parents=(a,),
                  backward=lambda g: a._accumulate(np.broadcast_to(g, a.value.shape)))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.value.size
    return Tensor(np.mean(a.value), parents=(a,),
                  backward=lambda g: a._accumulate(np.broadcast_to(g / n, a.value.shape)))


def concat_cols(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if any(p.value.ndim != 2 for p in parts) or len({p.value.shape[0] for p in parts}) != 1:
        raise ShapeError("concat_cols needs 2-D inputs with equal row counts")
    widths = np.cumsum([0] + [p.value.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, widths[:-1], widths[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return Tensor(np.concatenate([p.value for p in parts], axis=1), parents=tuple(parts),
                  backward=backward)


def column(a, j: int) -> Tensor:
    """Column j of a matrix as a 1-D vector."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.value)
        full[:, j] = g
        a._accumulate(full)

    return Tensor(a.value[:, j], parents=(a,), backward=backward)


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor(a.value[idx], parents=(a,), backward=backward)


def row_normalize(a, floor: float = 1e-12) -> Tensor:
    """Scale each row to unit euclidean norm."""
    a = as_tensor(a)
    norms = np.sqrt(np.sum(a.value ** 2, axis=1, keepdims=True)) + floor
    out = a.value / norms

    def backward(g):
        radial = np.sum(g * out, axis=1, keepdims=True)
        a._accumulate((g - out * radial) / norms)

    return Tensor(out, parents=(a,), backward=backward)


# --- parameters ------------------------------------------------------------


class ParamSet(dict):
    """Ordered mapping of parameter name to array. Names ending in ``.W`` are weights."""

    def copy(self) -> "ParamSet":
        return ParamSet((k, np.array(v, copy=True)) for k, v in self.items())

    @property
    def size(self) -> int:
        return int(sum(np.size(v) for v in self.values()))

    def flatten(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([np.ravel(v) for v in self.values()])

    def unflatten(self, flat) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError(f"expected {self.size} values, got shape {flat.shape}")
        out, pos = ParamSet(), 0
        for name, v in self.items():
            n = np.size(v)
            out[name] = flat[pos:pos + n].reshape(np.shape(v)).copy()
            pos += n
        return out

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self.items())

    def same_layout(self, other) -> bool:
        return list(self) == list(other) and all(
            np.shape(self[k]) == np.shape(other[k]) for k in self)

    def equals(self, other) -> bool:
        return self.same_layout(other) and all(np.array_equal(self[k], other[k]) for k in self)


def is_weight(name: str) -> bool:
    return name.endswith(".W")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple = (32, 32)
    output_dim: int = 1
    output_activation: str = "identity"
    init_seed: int = 0
    hidden_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigurationError(f"all layer widths must be >= 1, got {dims}")
        if self.hidden_activation != "relu":
            raise ConfigurationError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("sigmoid", "identity"):
            raise ConfigurationError(f"unsupported output activation {self.output_activation!r}")

    @property
    def layer_dims(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)


def mlp_init(spec: MlpSpec) -> ParamSet:
    """Glorot-uniform weights, zero biases, drawn from the spec's seed."""
    rng = substream(spec.init_seed, "init")
    params = ParamSet()
    for k, (fan_in, fan_out) in enumerate(spec.layer_dims):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"layer{k}.W"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"layer{k}.b"] = np.zeros(fan_out)
    return params


def mlp_apply(params: Mapping, spec: MlpSpec, X) -> Tensor:
    """Forward pass on the tape; ``params`` may hold Tensors or arrays."""
    X = as_tensor(X)
    if X.value.ndim != 2 or X.value.shape[1] != spec.input_dim:
        raise ShapeError(f"expected input with {spec.input_dim} columns, got shape {X.value.shape}")
    h = X
    last = len(spec.layer_dims) - 1
    for k in range(last + 1):
        h = add(matmul(h, params[f"layer{k}.W"]), params[f"layer{k}.b"])
        if k < last:
            h = relu(h)
    if spec.output_activation == "sigmoid":
        h = sigmoid(h)
    return h


def mlp_forward(params: ParamSet, spec: MlpSpec, X) -> np.ndarray:
    return mlp_apply(params, spec, X).value


# --- gradients and optimizers ----------------------------------------------


def value_and_grad(loss_fn: Callable[[dict], Tensor], params: ParamSet, stage: str = "loss"):
    """Evaluate ``loss_fn`` on tape-tracked copies of ``params``; return (loss, grads)."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss = as_tensor(loss_fn(leaves))
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericError(stage, value)
    if loss.requires_grad:
        loss.backward()
    grads = ParamSet()
    for k, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        if not np.all(np.isfinite(g)):
            raise NumericError(stage, "gradient")
        grads[k] = g
    return value, grads


def _check_same(params, grads):
    if not params.same_layout(grads):
        raise ShapeError("parameter and gradient layouts differ")


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    _check_same(params, grads)
    return ParamSet((k, params[k] - lr * grads[k]) for k in params)


@dataclass
class AdamState:
    first_moment: ParamSet
    second_moment: ParamSet
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamSet, lr=0.0005, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(params.zeros_like(), params.zeros_like(), lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet):
    """One bias-corrected Adam update. Returns (new_state, new_params)."""
    _check_same(params, grads)
    _check_same(params, state.first_moment)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v, new = ParamSet(), ParamSet(), ParamSet()
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k in params:
        g = grads[k]
        m[k] = b1 * state.first_moment[k] + (1.0 - b1) * g
        v[k] = b2 * state.second_moment[k] + (1.0 - b2) * g * g
        new[k] = params[k] - state.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    return AdamState(m, v, state.lr, b1, b2, state.eps, t), new


def l2_penalty(params: Mapping, lam: float):
    """lam * sum of squared weight-matrix entries; biases are not penalized.

    Returns a Tensor when any weight is a Tensor, else a float.
    """
    if lam < 0:
        raise ConfigurationError("l2 lambda must be >= 0")
    weights = [v for k, v in params.items() if is_weight(k)]
    if not any(isinstance(w, Tensor) for w in weights):
        return float(lam * sum(np.sum(np.asarray(w) ** 2) for w in weights))
    total = Tensor(0.0)
    for w in weights:
        total = add(total, sum_all(square(w)))
    return scale(total, lam)


def finite_difference_grad(fn: Callable[[ParamSet], float], params: ParamSet, h: float = 1e-5):
    """Central differences of a scalar function of a ParamSet, as a ParamSet."""
    flat = params.flatten()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(params.unflatten(flat))
        flat[i] = old - h
        down = fn(params.unflatten(flat))
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return params.unflatten(out)


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
