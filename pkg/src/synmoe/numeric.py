"""Dense float64 tensors with a small reverse-mode gradient engine.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the graph in a fixed
reverse-topological order so repeated runs accumulate identical bits.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

COSINE_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or Inf."""


class GraphError(RuntimeError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    # one reduction catches any NaN/Inf; recheck elementwise only on a hit
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
    return arr


class Tensor:
    """Immutable float64 array that remembers how it was produced."""

    __slots__ = ("data", "_parents", "_backward", "name")

    def __init__(self, data, _parents: tuple = (), _backward: Callable | None = None, name: str = ""):
        self.data = _as_array(data)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}{', name=' + self.name if self.name else ''})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Leaf tensor that owns a gradient buffer.

    The optimizer rebinds ``data`` in place of creating new parameters, so
    graph construction always sees the current value.
    """

    __slots__ = ("grad",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def tensor(data, name: str = "") -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data / b.data, (a, b), bw)


def square(x) -> Tensor:
    x = _lift(x)
    return Tensor(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x) -> Tensor:
    x = _lift(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _lift(x)
    return Tensor(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        s = np.negative(v)
        np.exp(s, out=s)
    s += 1.0
    np.reciprocal(s, out=s)
    return s


def sigmoid(x) -> Tensor:
    x = _lift(x)
    s = _sigmoid(x.data)
    return Tensor(s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x) -> Tensor:
    """Elementwise ``x * sigmoid(x)``."""
    x = _lift(x)
    s = _sigmoid(x.data)

    def bw(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return Tensor(x.data * s, (x,), bw)


# ---------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    p = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * p,)

    return Tensor(out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor(p, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor(out, (x,), bw)


# ---------------------------------------------------------------- shape / linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(np.matmul(a.data, b.data), (a, b), bw)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _lift(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index) -> Tensor:
    """Indexing, including integer-array gathers (gradients scatter-add)."""
    x = _lift(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor(x.data[index], (x,), bw)


def take_along_axis(x, indices: np.ndarray, axis: int) -> Tensor:
    x = _lift(x)
    indices = np.asarray(indices)

    def bw(g):
        full = np.zeros_like(x.data)
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis] = indices
        np.add.at(full, tuple(idx), g)
        return (full,)

    return Tensor(np.take_along_axis(x.data, indices, axis=axis), (x,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor(np.stack([t.data for t in ts], axis=axis), tuple(ts), bw)


def cosine(u, v, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``, clamped to [-1, 1].

    If either norm is below ``COSINE_EPS`` the cosine is 0 with zero gradient.
    """
    u, v = _lift(u), _lift(v)
    dot = (u.data * v.data).sum(axis=axis)
    nu = np.sqrt((u.data * u.data).sum(axis=axis))
    nv = np.sqrt((v.data * v.data).sum(axis=axis))
    live = (nu >= COSINE_EPS) & (nv >= COSINE_EPS)
    denom = np.maximum(nu * nv, COSINE_EPS)
    raw = np.where(live, dot / denom, 0.0)
    out = np.clip(raw, -1.0, 1.0)

    def bw(g):
        g = np.where(live, g, 0.0)
        safe_nu = np.where(live, nu, 1.0)
        safe_nv = np.where(live, nv, 1.0)
        ge = np.expand_dims(g, axis)
        c = np.expand_dims(raw, axis)
        du = ge * (v.data / np.expand_dims(safe_nu * safe_nv, axis) - c * u.data / np.expand_dims(safe_nu**2, axis))
        dv = ge * (u.data / np.expand_dims(safe_nu * safe_nv, axis) - c * v.data / np.expand_dims(safe_nv**2, axis))
        return du, dv

    return Tensor(out, (u, v), bw)


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    logits = _lift(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy shapes {logits.shape} vs targets {targets.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(len(targets)), targets))
    return mul(mean(picked), -1.0)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack_: list[tuple[Tensor, int]] = [(root, 0)]
    while stack_:
        node, i = stack_.pop()
        key = id(node)
        if i == 0:
            st = state.get(key)
            if st == 2:
                continue
            if st == 1:
                raise GraphError("cycle in computation graph")
            state[key] = 1
        if i < len(node._parents):
            stack_.append((node, i + 1))
            parent = node._parents[i]
            pst = state.get(id(parent))
            if pst == 1:
                raise GraphError("cycle in computation graph")
            if pst is None:
                stack_.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- randomness


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional stream path.

    Distinct ``stream`` tuples give independent streams; the same
    ``(seed, stream)`` always yields the same draws.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))
