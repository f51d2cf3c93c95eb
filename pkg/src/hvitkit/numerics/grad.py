"""Reverse-mode gradients over a recorded :class:`Graph` and a finite-difference checker."""

from __future__ import annotations

import numpy as np

from .tensor import OPS, Graph, ShapeError, Tensor


def _loss_id(g: Graph, loss) -> int:
    i = loss.node if isinstance(loss, Tensor) else int(loss)
    if isinstance(loss, Tensor) and loss.graph is not g:
        raise ValueError("loss tensor is not recorded on this graph")
    if g.nodes[i].value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {g.nodes[i].value.shape}")
    return i


def backward(g: Graph, loss) -> dict[str, np.ndarray]:
    """Exact gradients of the scalar ``loss`` with respect to every trainable leaf.

    Returns a mapping from parameter name to gradient array. Each node is
    visited once, in reverse recording order.
    """
    lid = _loss_id(g, loss)
    grads: list[np.ndarray | None] = [None] * (lid + 1)
    grads[lid] = np.ones_like(g.nodes[lid].value)
    for i in range(lid, -1, -1):
        node = g.nodes[i]
        gi = grads[i]
        if gi is None or node.op == "leaf" or not node.needs_grad:
            continue
        inputs = [g.nodes[j].value for j in node.inputs]
        parts = OPS[node.op].backward(gi, node.value, *inputs, **node.attrs)
        for j, part in zip(node.inputs, parts):
            if part is None or not g.nodes[j].needs_grad:
                continue
            grads[j] = part if grads[j] is None else grads[j] + part
    out = {}
    for pid, name in g.parameters.items():
        gp = grads[pid] if pid <= lid else None
        out[name] = np.zeros_like(g.nodes[pid].value) if gp is None else np.asarray(gp, dtype=np.float64)
    return out


def _downstream(g: Graph, start: int, stop: int) -> list[int]:
    """Ids in (start, stop] whose value depends on node ``start``."""
    touched = {start}
    order = []
    for i in range(start + 1, stop + 1):
        if any(j in touched for j in g.nodes[i].inputs):
            touched.add(i)
            order.append(i)
    return order


def _replay(g: Graph, leaf: int, value: np.ndarray, order: list[int], lid: int) -> float:
    vals = {leaf: value}
    nodes = g.nodes
    for i in order:
        node = nodes[i]
        args = [vals[j] if j in vals else nodes[j].value for j in node.inputs]
        vals[i] = OPS[node.op].forward(*args, **node.attrs)
    return float(np.asarray(vals.get(lid, nodes[lid].value)).reshape(-1)[0])


def numeric_gradients(g: Graph, loss, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` per parameter coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    lid = _loss_id(g, loss)
    out = {}
    for pid, name in g.parameters.items():
        base = g.nodes[pid].value
        num = np.zeros_like(base)
        if pid < lid:
            order = _downstream(g, pid, lid)
            flat = np.array(base).reshape(-1)
            nflat = num.reshape(-1)
            for k in range(flat.size):
                x = flat.copy()
                x[k] = flat[k] + h
                fp = _replay(g, pid, x.reshape(base.shape), order, lid)
                x[k] = flat[k] - h
                fm = _replay(g, pid, x.reshape(base.shape), order, lid)
                nflat[k] = (fp - fm) / (2.0 * h)
        out[name] = num
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, zero when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def grad_check(g: Graph, loss, h: float = 1e-5) -> float:
    """Largest per-parameter relative error between :func:`backward` and central differences.

    The error of a parameter tensor is measured in the Euclidean norm over its
    coordinates, so coordinates with vanishing gradients do not dominate.
    """
    analytic = backward(g, loss)
    numeric = numeric_gradients(g, loss, h)
    return max((relative_error(analytic[k], numeric[k]) for k in analytic), default=0.0)
