"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every primitive returns a new :class:`Tensor`. When any input requires a
gradient, the output carries a graph node stamped with a monotonically
increasing sequence number; :func:`backward` replays those nodes in reverse
construction order, so each node is visited exactly once and fan-out
gradients are summed before they are propagated further.

Broadcasting is restricted to the leading batch axis: an operand may have
the shape of the other operand with the first axis removed. Anything else
raises :class:`ShapeError`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_seq = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class _Node:
    __slots__ = ("op", "parents", "backward", "seq")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)


class Tensor:
    """An n-dimensional float64 value with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, tuple(parents), backward)
    return out


def _batch_broadcast(op: str, a: Tensor, b: Tensor) -> int:
    """Return 0 for equal shapes, 1 if ``b`` broadcasts over a's batch axis, 2 for the reverse."""
    if a.shape == b.shape:
        return 0
    if a.data.ndim >= 1 and a.shape[1:] == b.shape:
        return 1
    if b.data.ndim >= 1 and b.shape[1:] == a.shape:
        return 2
    raise ShapeError(op, a.shape, b.shape)


def _reduce(grad: np.ndarray, mode: int, which: int) -> np.ndarray:
    # which=0 -> first operand, which=1 -> second operand
    if (mode == 1 and which == 1) or (mode == 2 and which == 0):
        return grad.sum(axis=0)
    return grad


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, "matmul", (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    mode = _batch_broadcast("add", a, b)

    def bw(g):
        return _reduce(g, mode, 0), _reduce(g, mode, 1)

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    mode = _batch_broadcast("multiply", a, b)
    A, B = a.data, b.data

    def bw(g):
        return _reduce(g * B, mode, 0), _reduce(g * A, mode, 1)

    return _make(A * B, "multiply", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(x.data * c, "scale", (x,), bw)


def mask_mul(x: Tensor, mask) -> Tensor:
    """Multiply by a constant (non-differentiable) mask broadcast over the batch axis."""
    m = np.asarray(mask, dtype=DTYPE)
    if m.shape != x.shape and m.shape != x.shape[1:]:
        raise ShapeError("mask_mul", x.shape, m.shape)

    def bw(g):
        return (g * m,)

    return _make(x.data * m, "mask_mul", (x,), bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0  # subgradient 0 at exactly 0

    def bw(g):
        return (g * pos,)

    return _make(np.maximum(x.data, 0.0), "relu", (x,), bw)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum()), "sum", (x,), bw)


def flatten(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError("flatten", x.shape)
    shape = x.shape

    def bw(g):
        return (g.reshape(shape),)

    return _make(x.data.reshape(shape[0], -1), "flatten", (x,), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero 'same' padding. x: (B,C,H,W), w: (O,C,k,k), b: (O,)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    k = w.shape[2]
    if w.shape[3] != k or k % 2 == 0:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape)
    n, c, h, wd = x.shape
    o = w.shape[0]
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    # (n, c, h, w, k, k) -> (n, h, w, c, k, k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, h, wd, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + wd]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), "conv2d", parents, bw)


def avgpool2d(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("avgpool2d", x.shape)
    n, c, h, wd = x.shape
    out = x.data.reshape(n, c, h // 2, 2, wd // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, "avgpool2d", (x,), bw)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    s = np.exp(_log_softmax(x.data))

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax", (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; labels are integer class ids."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != y.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, y.shape)
    n = y.shape[0]
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss), "cross_entropy", (logits,), bw)


_PRIMITIVES = {
    "matmul": lambda ins, at: matmul(*ins),
    "add": lambda ins, at: add(*ins),
    "multiply": lambda ins, at: mul(*ins),
    "scale": lambda ins, at: scale(ins[0], at["c"]),
    "relu": lambda ins, at: relu(ins[0]),
    "conv2d": lambda ins, at: conv2d(*ins),
    "avgpool2d": lambda ins, at: avgpool2d(ins[0]),
    "flatten": lambda ins, at: flatten(ins[0]),
    "softmax": lambda ins, at: softmax(ins[0]),
    "cross_entropy": lambda ins, at: cross_entropy(ins[0], at["labels"]),
    "mask_mul": lambda ins, at: mask_mul(ins[0], at["mask"]),
    "sum": lambda ins, at: total(ins[0]),
}


def forward_primitive(op: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply a named primitive; see ``_PRIMITIVES`` for the available kinds."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn([_lift(t) for t in inputs], attrs or {})


# ---------------------------------------------------------------- backward


class Tape:
    """Nodes reachable from a root, ordered by construction sequence."""

    def __init__(self, root: Tensor):
        nodes = {}
        stack = [root]
        seen = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is not None:
                nodes[t._node.seq] = t
                stack.extend(p for p in t._node.parents if p.requires_grad)
        self.entries = [nodes[k] for k in sorted(nodes)]

    def __len__(self):
        return len(self.entries)

    def reversed(self):
        return reversed(self.entries)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; use :func:`zero_grad` to reset.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward on a tensor that does not require grad")
    pending = {id(loss): np.ones_like(loss.data)}
    for t in Tape(loss).reversed():
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        for parent, pg in zip(node.parents, node.backward(g)):
            if not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
