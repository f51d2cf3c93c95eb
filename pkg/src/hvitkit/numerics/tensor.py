"""Dense float64 tensors recorded on a replayable tape.

A :class:`Tensor` is an immutable value. When any input of an operation
belongs to a :class:`Graph`, the result is recorded on that graph as a node
holding the op name, input node ids, static attributes and the output value.
Because every node keeps enough information to be re-evaluated, the graph can
be replayed with perturbed leaves, which is what the finite-difference checker
relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Graph",
    "Node",
    "OPS",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "expand",
    "concat",
    "take",
    "reshape",
    "transpose",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "sum_all",
    "mean_all",
    "mse_loss",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable row-major float64 array, optionally bound to a graph node."""

    __slots__ = ("data", "graph", "node")

    def __init__(self, data, graph: Graph | None = None, node: int | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        bound = f", node={self.node}" if self.graph is not None else ""
        return f"Tensor(shape={self.shape}{bound})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class Op:
    forward: Callable[..., np.ndarray]
    # backward(grad_out, out, *inputs, **attrs) -> one gradient (or None) per input
    backward: Callable[..., tuple]


@dataclass
class Node:
    op: str  # "leaf" for parameters and constants
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    needs_grad: bool


@dataclass
class Graph:
    """Topologically ordered computation records plus trainable leaf ids."""

    nodes: list[Node] = field(default_factory=list)
    parameters: dict[int, str] = field(default_factory=dict)

    def _push(self, node: Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(node.value, self, len(self.nodes) - 1)

    def param(self, value, name: str | None = None) -> Tensor:
        """Register a trainable leaf."""
        t = self._push(Node("leaf", (), {}, _frozen_array(value), True))
        self.parameters[t.node] = name if name is not None else f"p{t.node}"
        return t

    def const(self, value) -> Tensor:
        return self._push(Node("leaf", (), {}, _frozen_array(value), False))

    def adopt(self, x) -> Tensor:
        """Return ``x`` as a node of this graph, wrapping foreign values as constants."""
        if isinstance(x, Tensor) and x.graph is self:
            return x
        if isinstance(x, Tensor) and x.graph is not None:
            raise ValueError("tensor belongs to a different graph")
        return self.const(x.data if isinstance(x, Tensor) else x)

    def param_ids(self) -> dict[str, int]:
        return {name: i for i, name in self.parameters.items()}


def _frozen_array(value) -> np.ndarray:
    arr = np.array(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


OPS: dict[str, Op] = {}


def _register(name: str, forward, backward) -> None:
    OPS[name] = Op(forward, backward)


def _apply(name: str, inputs: Sequence, **attrs) -> Tensor:
    tensors = [as_tensor(x) for x in inputs]
    graph = next((t.graph for t in tensors if t.graph is not None), None)
    out = OPS[name].forward(*(t.data for t in tensors), **attrs)
    if graph is None:
        return Tensor(out)
    bound = [graph.adopt(t) for t in tensors]
    ids = tuple(t.node for t in bound)
    needs = any(graph.nodes[i].needs_grad for i in ids)
    out = np.asarray(out, dtype=np.float64)
    out.flags.writeable = False
    return graph._push(Node(name, ids, attrs, out, needs))


# --------------------------------------------------------------------------
# matmul


def _matmul_fwd(a, b):
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ in {a.shape} and {b.shape}")
    return a @ b


def _matmul_bwd(g, out, a, b):
    if b.ndim == 2:
        k, n = b.shape
        ga = g @ b.T
        gb = a.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


_register("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a matrix, in which case the leading axes of ``a`` act as
    independent rows, or has exactly the same leading (batch) axes as ``a``.
    """
    return _apply("matmul", (a, b))


# --------------------------------------------------------------------------
# elementwise


def _same_shape(name):
    def check(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")

    return check


_check_add = _same_shape("add")
_check_sub = _same_shape("sub")
_check_mul = _same_shape("mul")


def _add_fwd(a, b):
    _check_add(a, b)
    return a + b


def _sub_fwd(a, b):
    _check_sub(a, b)
    return a - b


def _mul_fwd(a, b):
    _check_mul(a, b)
    return a * b


_register("add", _add_fwd, lambda g, out, a, b: (g, g))
_register("sub", _sub_fwd, lambda g, out, a, b: (g, -g))
_register("mul", _mul_fwd, lambda g, out, a, b: (g * b, g * a))
_register("scale", lambda a, c: a * c, lambda g, out, a, c: (g * c,))


def add(a, b) -> Tensor:
    return _apply("add", (a, b))


def sub(a, b) -> Tensor:
    return _apply("sub", (a, b))


def mul(a, b) -> Tensor:
    return _apply("mul", (a, b))


def scale(a, c: float) -> Tensor:
    return _apply("scale", (a,), c=float(c))


def _add_bias_fwd(a, b):
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {a.shape}")
    return a + b


def _add_bias_bwd(g, out, a, b):
    return g, g.reshape(-1, b.shape[0]).sum(axis=0)


_register("add_bias", _add_bias_fwd, _add_bias_bwd)


def add_bias(a, b) -> Tensor:
    """``a + b`` where ``b`` is a vector matching the last axis of ``a``."""
    return _apply("add_bias", (a, b))


# --------------------------------------------------------------------------
# structural


def _expand_fwd(a, lead):
    return np.broadcast_to(a, tuple(lead) + a.shape).copy()


def _expand_bwd(g, out, a, lead):
    return (g.reshape((-1,) + a.shape).sum(axis=0),)


_register("expand", _expand_fwd, _expand_bwd)


def expand(a, lead: Sequence[int]) -> Tensor:
    """Tile ``a`` along new leading axes of sizes ``lead``."""
    return _apply("expand", (a,), lead=tuple(int(n) for n in lead))


def _concat_fwd(*arrays, axis):
    return np.concatenate(arrays, axis=axis)


def _concat_bwd(g, out, *arrays, axis):
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


_register("concat", _concat_fwd, _concat_bwd)


def concat(tensors: Sequence, axis: int) -> Tensor:
    return _apply("concat", tuple(tensors), axis=axis)


def _take_fwd(a, index, axis):
    return np.take(a, index, axis=axis)


def _take_bwd(g, out, a, index, axis):
    ga = np.zeros_like(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = index
    ga[tuple(sl)] = g
    return (ga,)


_register("take", _take_fwd, _take_bwd)


def take(a, index, axis: int) -> Tensor:
    """Select ``index`` (an int or a slice) along ``axis``."""
    return _apply("take", (a,), index=index, axis=axis)


_register(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda g, out, a, shape: (g.reshape(a.shape),),
)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return _apply("reshape", (a,), shape=tuple(shape))


_register(
    "transpose",
    lambda a, axes: np.transpose(a, axes),
    lambda g, out, a, axes: (np.transpose(g, np.argsort(axes)),),
)


def transpose(a, axes: Sequence[int]) -> Tensor:
    return _apply("transpose", (a,), axes=tuple(axes))


# --------------------------------------------------------------------------
# nonlinearities and normalization


def _softmax_fwd(a):
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _softmax_bwd(g, out, a):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


_register("softmax", _softmax_fwd, _softmax_bwd)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    return _apply("softmax", (a,))


def _ln_fwd(a, gain, bias, eps):
    mu = a.mean(axis=-1, keepdims=True)
    var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
    return (a - mu) / np.sqrt(var + eps) * gain + bias


def _ln_bwd(g, out, a, gain, bias, eps):
    d = a.shape[-1]
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gx = g * gain
    ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    ggain = (g * xhat).reshape(-1, d).sum(axis=0)
    gbias = g.reshape(-1, d).sum(axis=0)
    return ga, ggain, gbias


_register("layer_norm", _ln_fwd, _ln_bwd)


def layer_norm(a, gain, bias, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    return _apply("layer_norm", (a, gain, bias), eps=float(eps))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_fwd(a):
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a**3)))


def _gelu_bwd(g, out, a):
    t = np.tanh(_GELU_C * (a + 0.044715 * a**3))
    dt = (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * a**2)
    return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)


_register("gelu", _gelu_fwd, _gelu_bwd)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    return _apply("gelu", (a,))


# --------------------------------------------------------------------------
# reductions and losses

_register("sum_all", lambda a: np.array(a.sum()), lambda g, out, a: (np.full_like(a, g),))
_register("mean_all", lambda a: np.array(a.mean()), lambda g, out, a: (np.full_like(a, g / a.size),))


def sum_all(a) -> Tensor:
    return _apply("sum_all", (a,))


def mean_all(a) -> Tensor:
    return _apply("mean_all", (a,))


def _mse_fwd(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    return np.array(((pred - target) ** 2).mean())


def _mse_bwd(g, out, pred, target):
    d = 2.0 * (pred - target) / pred.size * g
    return d, -d


_register("mse", _mse_fwd, _mse_bwd)


def mse_loss(pred, target) -> Tensor:
    """Mean squared error, a scalar tensor."""
    return _apply("mse", (pred, target))
