"""Dense float64 linear algebra with a small reverse-mode tape.

Only the operations the samplers, hypernetworks and factor models need are
implemented. A :class:`Tensor` records its parents and a closure that pushes
the upstream gradient back to them; :func:`backward` walks the recorded graph
in reverse topological order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

LEAKY_SLOPE = 0.01
ELU_ALPHA = 1.0
ACTIVATIONS = ("leaky_relu", "elu", "sigmoid", "softmax", "identity")


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class GraphError(RuntimeError):
    """Raised when a loss does not depend on any recorded parameter."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the reflected method

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # --- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, fn):
    return Tensor(data, parents, fn)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), fn)


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), fn)


def power(a, p: float):
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), fn)


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid_np(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def sigmoid(a):
    out = sigmoid_np(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a):
    s = sigmoid_np(-a.data)
    return _node(log_sigmoid_np(a.data), (a,), lambda g: (g * s,))


def leaky_relu(a):
    slope = np.where(a.data > 0, 1.0, LEAKY_SLOPE)
    return _node(a.data * slope, (a,), lambda g: (g * slope,))


def elu(a):
    neg_part = ELU_ALPHA * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(a.data > 0, a.data, neg_part)
    d = np.where(a.data > 0, 1.0, neg_part + ELU_ALPHA)
    return _node(out, (a,), lambda g: (g * d,))


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), fn)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, i, j):
    return _node(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), fn)


def take_along_axis(a, indices: np.ndarray, axis: int):
    def fn(g):
        full = np.zeros_like(a.data)
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis] = indices
        np.add.at(full, tuple(idx), g)
        return (full,)

    return _node(np.take_along_axis(a.data, indices, axis), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = -1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def log_softmax(a, axis: int = -1, mask: np.ndarray | None = None):
    """Log-softmax along ``axis``; entries where ``mask`` is False get -inf."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def fn(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), fn)


def softmax(a, axis: int = -1):
    return exp(log_softmax(a, axis))


def solve(A, b):
    """Batched ``A^{-1} b`` with ``b`` of shape (..., k)."""
    A, b = as_tensor(A), as_tensor(b)
    x = np.linalg.solve(A.data, b.data[..., None])[..., 0]

    def fn(g):
        gb = np.linalg.solve(np.swapaxes(A.data, -1, -2), g[..., None])[..., 0]
        gA = -gb[..., :, None] * x[..., None, :]
        return _unbroadcast(gA, A.shape), _unbroadcast(gb, b.shape)

    return _node(x, (A, b), fn)


def straight_through(hard: np.ndarray, soft: Tensor):
    """Forward takes ``hard``; the gradient passes to ``soft`` unchanged."""
    return _node(np.asarray(hard, dtype=np.float64), (soft,), lambda g: (g,))


def where(cond: np.ndarray, a, b):
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _node(np.where(cond, a.data, b.data), (a, b), fn)


# --- parameter sets ------------------------------------------------------


@dataclass
class ParamSet:
    """Named float64 matrices plus an MLP layer layout.

    ``sizes`` lists layer widths from input to output; ``activations`` has one
    tag per weight layer. Weights are ``W{k}`` (in x out), biases ``b{k}``
    (1 x out). Extra non-MLP entries may be stored alongside.
    """

    params: dict[str, np.ndarray]
    sizes: tuple[int, ...] = ()
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.activations) != max(len(self.sizes) - 1, 0):
            raise ShapeError("need one activation per weight layer")
        for k, act in enumerate(self.activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            w = self.params[f"W{k}"]
            if w.shape != (self.sizes[k], self.sizes[k + 1]):
                raise ShapeError(f"W{k} has shape {w.shape}, layout wants "
                                 f"{(self.sizes[k], self.sizes[k + 1])}")

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.params.items()}, self.sizes, self.activations)

    def __getitem__(self, key):
        return self.params[key]

    def names(self):
        return list(self.params)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_mlp(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
             out_scale: float = 1.0) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for k in range(len(sizes) - 1):
        lim = math.sqrt(6.0 / (sizes[k] + sizes[k + 1]))
        w = rng.uniform(-lim, lim, size=(sizes[k], sizes[k + 1]))
        if k == len(sizes) - 2:
            w = w * out_scale
        params[f"W{k}"] = w
        params[f"b{k}"] = np.zeros((1, sizes[k + 1]))
    return ParamSet(params, tuple(sizes), tuple(activations))


@dataclass
class GradRecord:
    """Leaves watched for one recorded computation.

    Each call to :meth:`watch` wraps a ParamSet's entries in leaf tensors
    keyed ``"{prefix}{name}"``. The record is single-use: build, compute a
    loss, call :func:`backward` once.
    """

    leaves: dict[str, Tensor] = field(default_factory=dict)
    loss: float | None = None
    grads: dict[str, np.ndarray] | None = None

    def watch(self, params: ParamSet, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, value in params.params.items():
            t = Tensor(value, name=prefix + name)
            self.leaves[prefix + name] = t
            out[name] = t
        return out


def apply_activation(x: Tensor, act: str) -> Tensor:
    if act == "leaky_relu":
        return leaky_relu(x)
    if act == "elu":
        return elu(x)
    if act == "sigmoid":
        return sigmoid(x)
    if act == "softmax":
        return softmax(x, axis=-1)
    if act == "identity":
        return x
    raise ValueError(f"unknown activation {act!r}")


def mlp_apply(weights: Mapping[str, Tensor], sizes, activations, x) -> Tensor:
    """Run an MLP given already-wrapped weight tensors (leading batch dims allowed)."""
    h = as_tensor(x)
    for k, act in enumerate(activations):
        h = apply_activation(matmul(h, weights[f"W{k}"]) + weights[f"b{k}"], act)
    return h


def mlp_forward(params: ParamSet, x, record: bool = False):
    """Forward pass. Returns an array, or ``(Tensor, GradRecord)`` when recording."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xd.shape[-1] != params.sizes[0]:
        raise ShapeError(f"input has {xd.shape[-1]} columns, first layer expects {params.sizes[0]}")
    _check_finite(xd, "mlp input")
    if record:
        rec = GradRecord()
        w = rec.watch(params)
        return mlp_apply(w, params.sizes, params.activations, x), rec
    w = {k: Tensor(v) for k, v in params.params.items()}
    return mlp_apply(w, params.sizes, params.activations, xd).data


def backward(record: GradRecord, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for every leaf in ``record``."""
    if loss.data.size != 1:
        raise ShapeError("loss must be a scalar")
    _check_finite(loss.data, "loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    leaf_ids = {id(t) for t in record.leaves.values()}
    if not leaf_ids & seen:
        raise GraphError("loss is not reachable from any recorded parameter")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if id(node) not in leaf_ids else grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for name, leaf in record.leaves.items():
        g = grads.get(id(leaf))
        out[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
    record.loss = float(loss.data)
    record.grads = out
    return out


# --- optimisation -----------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float,
              state: AdamState, prefix: str = "") -> tuple[ParamSet, AdamState]:
    """One Adam update. ``grads`` keys are ``prefix + param name``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name in params.params:
        g = grads.get(prefix + name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {prefix + name}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v = dict(state.m), dict(state.v)
    new = {}
    for name, value in params.params.items():
        g = grads.get(prefix + name)
        key = prefix + name
        if g is None:
            new[name] = value.copy()
            continue
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {key} has shape {g.shape}, expected {value.shape}")
        mk = b1 * m.get(key, np.zeros_like(value)) + (1 - b1) * g
        vk = b2 * v.get(key, np.zeros_like(value)) + (1 - b2) * g * g
        m[key], v[key] = mk, vk
        mhat = mk / (1 - b1 ** step)
        vhat = vk / (1 - b2 ** step)
        new[name] = value - lr * mhat / (np.sqrt(vhat) + state.eps)
    return (ParamSet(new, params.sizes, params.activations),
            AdamState(step, m, v, b1, b2, state.eps))


def ridge_solve_dense(X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """(X^T X + lam I)^{-1} X^T y via Cholesky."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(X.shape[0], -1)
    gram = X.T @ X + lam * np.eye(X.shape[1])
    return cho_solve(cho_factor(gram, lower=True), X.T @ y)


# --- checkpoints ------------------------------------------------------------


def _mat_to_json(a: np.ndarray) -> dict:
    a2 = a.reshape(a.shape[0], -1) if a.ndim >= 2 else a.reshape(1, -1)
    return {"rows": int(a2.shape[0]), "cols": int(a2.shape[1]),
            "data": [float(v) for v in a2.ravel()]}


def _mat_from_json(d: dict) -> np.ndarray:
    data = np.array(d["data"], dtype=np.float64)
    if data.size != d["rows"] * d["cols"]:
        raise ShapeError("checkpoint matrix data length does not match rows*cols")
    return data.reshape(d["rows"], d["cols"])


def paramset_to_json(p: ParamSet) -> dict:
    return {"sizes": list(p.sizes), "activations": list(p.activations),
            "params": {k: _mat_to_json(v) for k, v in p.params.items()}}


def paramset_from_json(d: dict) -> ParamSet:
    return ParamSet({k: _mat_from_json(v) for k, v in d["params"].items()},
                    tuple(d["sizes"]), tuple(d["activations"]))


def adam_to_json(s: AdamState) -> dict:
    return {"step": s.step, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
            "m": {k: _mat_to_json(v) for k, v in s.m.items()},
            "v": {k: _mat_to_json(v) for k, v in s.v.items()}}


def adam_from_json(d: dict, shapes: Mapping[str, tuple] | None = None) -> AdamState:
    def load(k, v):
        a = _mat_from_json(v)
        return a.reshape(shapes[k]) if shapes and k in shapes else a

    return AdamState(d["step"], {k: load(k, v) for k, v in d["m"].items()},
                     {k: load(k, v) for k, v in d["v"].items()},
                     d["beta1"], d["beta2"], d["eps"])


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True))
    tmp.replace(path)


def save_checkpoint(path, paramsets: Mapping[str, ParamSet],
                    optimizers: Mapping[str, AdamState] | None = None, extra: dict | None = None) -> None:
    doc = {"paramsets": {k: paramset_to_json(v) for k, v in paramsets.items()},
           "optimizers": {k: adam_to_json(v) for k, v in (optimizers or {}).items()},
           "extra": extra or {}}
    write_json_atomic(path, doc)


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    psets = {k: paramset_from_json(v) for k, v in doc["paramsets"].items()}
    opts = {k: adam_from_json(v) for k, v in doc.get("optimizers", {}).items()}
    return psets, opts, doc.get("extra", {})


def numeric_grad(f: Callable[[], float], arrays: Iterable[np.ndarray], h: float = 1e-5):
    """Central finite differences of ``f`` w.r.t. each array, perturbed in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out
