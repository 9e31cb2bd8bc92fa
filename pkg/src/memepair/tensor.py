"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside an active :class:`Graph` (``with Graph() as g:``)
are appended to that graph's tape whenever at least one input requires a
gradient. Outside a graph, operations only compute forward values, which is
the inference path. A graph is single-use: one :meth:`Graph.backward` call,
visiting nodes in exact reverse insertion order.

Broadcasting is limited to what the model needs: bias adds, batched
matmul against a shared weight matrix, and row-wise reductions.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._kernels import K
from .errors import GraphError, NonFiniteError, ShapeError

_active = threading.local()


def _graph_stack() -> list:
    stack = getattr(_active, "stack", None)
    if stack is None:
        stack = _active.stack = []
    return stack


def current_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float64 array that can take part in a graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass(frozen=True)
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    input_ids: tuple[int, ...]  # producing node index, -1 for leaves/constants
    out: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Append-only tape of recorded operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if not stack or stack[-1] is not self:
            raise GraphError("graph context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind, inputs, out, vjp) -> None:
        if self._consumed:
            raise GraphError("cannot record onto a graph that already ran backward")
        ids = tuple(t._node if (t._node is not None and self._owns(t)) else -1 for t in inputs)
        out._node = len(self.nodes)
        self.nodes.append(Node(kind, tuple(inputs), ids, out, vjp))

    def _owns(self, t: Tensor) -> bool:
        return t._node < len(self.nodes) and self.nodes[t._node].out is t

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self._consumed:
            raise GraphError("backward already ran on this graph; graphs are single-use")
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires a gradient")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._node is None or not self._owns(loss):
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, nid, gi in zip(node.inputs, node.input_ids, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if nid < 0:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Run backward on ``graph`` (default: the innermost active graph)."""
    graph = graph if graph is not None else current_graph()
    if graph is None:
        raise GraphError("no graph: run the forward pass inside `with Graph():`")
    graph.backward(loss)


# --------------------------------------------------------------------------
# op plumbing
# --------------------------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _finish(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{kind}: non-finite value in forward output")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    graph = current_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(kind, inputs, out, vjp)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _finish("add", (a, b), a.data + b.data,
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _finish("sub", (a, b), a.data - b.data,
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _finish("mul", (a, b), ad * bd,
                   lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _finish("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    xd = _rows(x.data) if x.ndim else x.data.reshape(1, 1)
    y = K.gelu_fwd(xd).reshape(x.shape)
    return _finish("gelu", (x,), y, lambda g: (K.gelu_bwd(xd, _rows(g) if g.ndim else g.reshape(1, 1)).reshape(x.shape),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _finish("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# --------------------------------------------------------------------------
# linear algebra and shape ops
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b``; ``b`` may be a shared 2-D weight applied to a batched ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = _rows(ad).T @ _rows(g)
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _finish("matmul", (a, b), out, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _finish("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", (x,), np.ascontiguousarray(np.transpose(x.data, axes)),
                   lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    axis = axis % xs[0].ndim
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _finish("concat", xs, np.concatenate([x.data for x in xs], axis=axis),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _finish("getitem", (x,), np.array(x.data[index], dtype=np.float64), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _finish("embedding", (table,), table.data[ids], vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", (x,), out, vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# row-wise kernels
# --------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows: last axis must be non-empty, got shape {x.shape}")
    y2 = K.softmax_fwd(_rows(x.data))
    y = y2.reshape(x.shape)
    return _finish("softmax", (x,), y,
                   lambda g: (K.softmax_bwd(y2, _rows(g)).reshape(y.shape),))


def log_softmax_rows(x: Tensor) -> Tensor:
    """Log-softmax over the last axis via max-shifted log-sum-exp."""
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _finish("log_softmax", (x,), out,
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """gamma * (x - mean) / sqrt(var + eps) + beta over the last axis (biased variance)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    y2, xhat, rstd = K.layer_norm_fwd(_rows(x.data), gamma.data, beta.data, float(eps))
    shape = x.shape

    def vjp(g):
        dx, dgamma, dbeta = K.layer_norm_bwd(_rows(g), xhat, rstd, gamma.data)
        return dx.reshape(shape), dgamma, dbeta

    return _finish("layer_norm", (x, gamma, beta), y2.reshape(shape), vjp)
