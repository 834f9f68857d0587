"""Dense float64 arithmetic with a define-by-run reverse-mode graph.

Every operation accepts either plain ``numpy`` arrays or :class:`Node`
objects.  With plain arrays it simply computes the value; as soon as one
input is a node, the result is recorded as a new node of the same
:class:`Graph` and :func:`backward` can later propagate gradients through it.

Values are 2-D ``(rows, cols)`` matrices.  A leading batch axis is allowed on
activations (``(batch, rows, cols)``); gradients flowing into an operand with
fewer leading axes are summed over the extra ones.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ParameterError",
    "NonFiniteError",
    "DegenerateMaskError",
    "Graph",
    "Node",
    "as_matrix",
    "value_of",
    "record",
    "matmul",
    "transpose",
    "elementwise",
    "add",
    "sub",
    "hadamard",
    "scale",
    "relu",
    "add_n",
    "row_softmax",
    "soft_threshold",
    "rms_normalize",
    "mse_loss",
    "cross_entropy_loss",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class DegenerateMaskError(ValueError):
    pass


class Node:
    """One recorded value in a :class:`Graph`."""

    __slots__ = ("graph", "id", "op", "parents", "value", "grad", "name", "_backward")

    def __init__(self, graph, node_id, op, parents, value, backward_fn, name=None):
        self.graph = graph
        self.id = node_id
        self.op = op
        self.parents = parents
        self.value = value
        self.grad = None
        self.name = name
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


class Graph:
    """Append-only list of nodes; ids are positions, so parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _append(self, op, parents, value, backward_fn, name=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(parents), value, backward_fn, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        return self._append("leaf", (), as_matrix(value, allow_batch=True), None, name)

    def leaves(self, params: Mapping[str, np.ndarray]) -> dict[str, Node]:
        return {k: self.leaf(v, name=k) for k, v in params.items()}

    def release(self) -> None:
        """Drop every node so the step's arrays are freed without waiting for the cycle collector."""
        for node in self.nodes:
            node.parents, node._backward, node.graph = (), None, None
        self.nodes = []

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradients of named leaves (zeros for leaves the loss does not reach)."""
        out = {}
        for node in self.nodes:
            if node.is_leaf and node.name is not None:
                out[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return out


def as_matrix(x, allow_batch: bool = False) -> np.ndarray:
    """Coerce to a finite float64 array of rank 2 (or 3 with ``allow_batch``)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    ranks = (2, 3) if allow_batch else (2,)
    if arr.ndim not in ranks:
        raise ShapeError(f"expected a matrix, got array of shape {arr.shape}")
    if arr.shape[-1] == 0 or arr.shape[-2] == 0:
        raise ShapeError(f"matrix dimensions must be positive, got {arr.shape}")
    _check_finite(arr, "input")
    return arr


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _graph_of(*xs) -> Graph | None:
    graph = None
    for x in xs:
        if isinstance(x, Node):
            if graph is None:
                graph = x.graph
            elif x.graph is not graph:
                raise ValueError("operands belong to different graphs")
    return graph


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # undo leading-axis broadcasting (batch axis) and size-1 broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def record(op: str, inputs: Sequence, value: np.ndarray, backward_fn: Callable) -> np.ndarray | Node:
    """Wrap a computed value as a graph node when any input is a node.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    _check_finite(value, op)
    graph = _graph_of(*inputs)
    if graph is None:
        return value
    return graph._append(op, inputs, value, backward_fn)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _sum_to_shape(ga, av.shape), _sum_to_shape(gb, bv.shape)

    return record("matmul", (a, b), out, back)


def transpose(a):
    out = np.swapaxes(value_of(a), -1, -2)
    return record("transpose", (a,), out, lambda g: (np.swapaxes(g, -1, -2),))


def _check_same(av, bv, kind, row_ok=False):
    # b may drop the batch axis; with row_ok it may also be a single (1, cols) row
    if row_ok and bv.shape == (1, av.shape[-1]):
        return
    if av.shape[-2:] != bv.shape[-2:] or (av.ndim == bv.ndim and av.shape != bv.shape):
        raise ShapeError(f"{kind}: shape mismatch {av.shape} vs {bv.shape}")


def elementwise(kind: str, a, b=None):
    """Entrywise ``add``, ``sub``, ``hadamard``, ``scale`` (by a constant) or ``relu``."""
    av = value_of(a)
    if kind == "relu":
        out = np.maximum(av, 0.0)
        return record("relu", (a,), out, lambda g: (g * (av > 0),))
    if kind == "scale":
        c = float(b)
        return record("scale", (a,), av * c, lambda g: (g * c,))
    if kind not in ("add", "sub", "hadamard"):
        raise ValueError(f"unknown elementwise kind {kind!r}")
    bv = value_of(b)
    _check_same(av, bv, kind, row_ok=kind == "add")
    if kind == "add":
        out = av + bv
        back = lambda g: (_sum_to_shape(g, av.shape), _sum_to_shape(g, bv.shape))  # noqa: E731
    elif kind == "sub":
        out = av - bv
        back = lambda g: (_sum_to_shape(g, av.shape), _sum_to_shape(-g, bv.shape))  # noqa: E731
    else:
        out = av * bv
        back = lambda g: (_sum_to_shape(g * bv, av.shape), _sum_to_shape(g * av, bv.shape))  # noqa: E731
    return record(kind, (a, b), out, back)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def hadamard(a, b):
    return elementwise("hadamard", a, b)


def scale(a, c: float):
    return elementwise("scale", a, c)


def relu(a):
    return elementwise("relu", a)


def add_n(terms: Iterable):
    """Sum of same-shaped operands, summed left to right."""
    terms = list(terms)
    if not terms:
        raise ValueError("add_n needs at least one term")
    vals = [value_of(t) for t in terms]
    for v in vals[1:]:
        _check_same(vals[0], v, "add_n")
    out = vals[0].copy()
    for v in vals[1:]:
        out = out + v

    def back(g):
        return tuple(_sum_to_shape(g, v.shape) for v in vals)

    return record("add_n", terms, out, back)


def row_softmax(m):
    mv = value_of(m)
    shifted = mv - mv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record("row_softmax", (m,), out, back)


def soft_threshold(m, xi):
    """``sign(x) * max(|x| - xi, 0)``; the subgradient at ``|x| == xi`` is 0.

    ``xi`` may be a float or a 1x1 node (learnable threshold).
    """
    mv = value_of(m)
    xv = float(np.asarray(value_of(xi)).reshape(-1)[0])
    if xv < 0:
        raise ParameterError(f"threshold must be non-negative, got {xv}")
    active = np.abs(mv) > xv
    sign = np.sign(mv)
    out = np.where(active, mv - sign * xv, 0.0)

    if isinstance(xi, Node):
        def back(g):
            gx = -(g * sign * active).sum()
            return g * active, np.full(xi.value.shape, gx)

        return record("soft_threshold", (m, xi), out, back)
    return record("soft_threshold", (m,), out, lambda g: (g * active,))


def rms_normalize(m, eps: float = 1e-6):
    if eps <= 0:
        raise ParameterError("eps must be positive")
    mv = value_of(m)
    ms = (mv * mv).mean(axis=-1, keepdims=True) + eps
    r = 1.0 / np.sqrt(ms)
    out = mv * r
    n = mv.shape[-1]

    def back(g):
        # d/dx (x r) = r g - x r^3 (x . g) / n
        dot = (g * mv).sum(axis=-1, keepdims=True)
        return (g * r - mv * (r ** 3) * dot / n,)

    return record("rms_normalize", (m,), out, back)


def mse_loss(pred, target, mask=None):
    """Mean squared difference over entries where ``mask`` is 1."""
    pv = value_of(pred)
    tv = np.asarray(target, dtype=np.float64)
    if pv.shape != tv.shape:
        raise ShapeError(f"mse_loss: prediction {pv.shape} vs target {tv.shape}")
    diff = pv - tv
    if mask is None:
        w = np.ones_like(diff)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=np.float64), diff.shape)
        if not np.all((w == 0) | (w == 1)):
            raise ValueError("mask entries must be 0 or 1")
    count = w.sum()
    if count == 0:
        raise DegenerateMaskError("mask selects no entries")
    out = np.array([[(w * diff * diff).sum() / count]])

    def back(g):
        return (g[0, 0] * 2.0 * w * diff / count,)

    return record("mse_loss", (pred,), out, back)


def cross_entropy_loss(logits, labels):
    """Mean over rows of ``-log softmax(logits)[label]``.

    ``logits`` may be batched; rows of all batch items are pooled.
    """
    lv = value_of(logits)
    c = lv.shape[-1]
    flat = lv.reshape(-1, c)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != flat.shape[0]:
        raise ShapeError(f"{lab.shape[0]} labels for {flat.shape[0]} rows")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(flat.shape[0])
    nll = logz - shifted[rows, lab]
    out = np.array([[nll.mean()]])

    def back(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, lab] -= 1.0
        return ((g[0, 0] * p / flat.shape[0]).reshape(lv.shape),)

    return record("cross_entropy", (logits,), out, back)


def backward(loss: Node) -> dict[str, np.ndarray]:
    """Populate ``grad`` on every node reachable from ``loss``; returns named leaf gradients."""
    if not isinstance(loss, Node):
        raise TypeError("backward needs a graph node")
    if loss.value.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.value.shape}")
    graph = loss.graph
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(graph.nodes[: loss.id + 1]):
        if node.grad is None or node._backward is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if not isinstance(parent, Node) or g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    return graph.gradients()


def finite_diff_check(f: Callable, params: Mapping[str, np.ndarray], h: float = 1e-6) -> float:
    """Largest relative error between :func:`backward` and central differences.

    ``f`` maps a dict of parameters (arrays or nodes) to a 1x1 result.  The
    relative error of each coordinate is ``|numeric - analytic| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ParameterError("step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    graph = Graph()
    leaves = graph.leaves(params)
    analytic = backward(f(leaves))
    worst = 0.0
    for name, base in params.items():
        for idx in np.ndindex(base.shape):
            probe = dict(params)
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            probe[name] = plus
            fp = float(np.asarray(value_of(f(probe))).reshape(-1)[0])
            probe[name] = minus
            fm = float(np.asarray(value_of(f(probe))).reshape(-1)[0])
            num = (fp - fm) / (2 * h)
            ana = analytic[name][idx]
            worst = max(worst, abs(num - ana) / max(1.0, abs(ana)))
    return worst
