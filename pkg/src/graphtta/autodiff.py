"""Small dense reverse-mode autodiff on top of numpy (float64).

Every op builds a new :class:`Tensor` that remembers its parents and a
vector-Jacobian closure. :func:`backward` walks that recorded graph in
reverse topological order. Gradients live in a per-call dict, never on
the tensors, so a frozen set of weights can be read by several graphs.
"""

from __future__ import annotations

import contextlib
import hashlib
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GradientError(RuntimeError):
    """Raised on non-scalar losses or non-finite gradients."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "_parents", "_vjp", "name")

    def __init__(self, data, _parents: tuple = (), _vjp: Callable | None = None, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        if _GRAD_ENABLED and _parents:
            self._parents = _parents
            self._vjp = _vjp
        else:
            self._parents = ()
            self._vjp = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}{', name=' + self.name if self.name else ''})"

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out leading dims, then dims that were size-1 in the operand
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _binary_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")
    return Tensor(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "sub")
    return Tensor(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "mul")
    return Tensor(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) dims broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, (a, b), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tabs(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return Tensor(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(
        np.concatenate([x.data for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def index(x, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    x = as_tensor(x)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(x.data[idx], (x,), vjp)


def take(x, indices, axis: int) -> Tensor:
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return Tensor(np.take(x.data, indices, axis=axis), (x,), vjp)


def scatter_add(base, rows, cols, values) -> Tensor:
    """Return ``base`` with ``values[k]`` added at ``(rows[k], cols[k])``."""
    base, values = as_tensor(base), as_tensor(values)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if base.ndim != 2 or values.shape != rows.shape or rows.shape != cols.shape:
        raise ShapeError("scatter_add: need 2-D base and matching 1-D rows/cols/values")
    out = base.data.copy()
    np.add.at(out, (rows, cols), values.data)
    return Tensor(out, (base, values), lambda g: (g, g[rows, cols]))


def mean_abs_diff(a, b) -> Tensor:
    """Mean over all elements of ``|a - b|``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mean_abs_diff: shape mismatch {a.shape} vs {b.shape}")
    return mean(tabs(sub(a, b)))


# ---------------------------------------------------------------------------
# parameters and gradients


class ParamSet(OrderedDict):
    """Ordered name -> leaf :class:`Tensor` map."""

    def __setitem__(self, key, value):
        super().__setitem__(key, as_tensor(value))

    @classmethod
    def from_arrays(cls, arrays) -> "ParamSet":
        ps = cls()
        for k, v in arrays.items():
            ps[k] = Tensor(np.array(v, dtype=DTYPE, copy=True), name=k)
        return ps

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def copy(self) -> "ParamSet":
        return ParamSet.from_arrays(self.arrays())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.items()}

    def compatible(self, other: "ParamSet") -> bool:
        return list(self.shapes().items()) == list(other.shapes().items())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def num_values(self) -> int:
        return sum(v.data.size for v in self.values())


GradRecord = dict  # name -> np.ndarray, same shapes as the ParamSet


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: ParamSet | Iterable[tuple[str, Tensor]]) -> GradRecord:
    """Reverse-mode gradients of scalar ``loss`` for every tensor in ``params``.

    Parameters that do not reach ``loss`` get exact zeros.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    items = list(params.items()) if isinstance(params, dict) else list(params)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return {name: np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=DTYPE) for name, t in items}


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; updates ``ParamSet`` arrays in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v, dtype=DTYPE) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=DTYPE) for k, v in state["v"].items()}

    def step(self, params: ParamSet, grads: GradRecord, lr: float | None = None) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter {name!r}")
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, param {params[name].shape}")
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params[name].data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def optimizer_step(params: ParamSet, grads: GradRecord, state: Adam, lr: float | None = None) -> tuple[ParamSet, Adam]:
    state.step(params, grads, lr)
    return params, state


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. ``arr`` (mutated and restored)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out
