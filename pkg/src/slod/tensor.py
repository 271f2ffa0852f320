"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
inputs and a closure computing the vector-Jacobian product. Nodes carry a
monotonically increasing sequence number, so reverse construction order is a
valid (and deterministic) reverse topological order for ``backward``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError, UsageError

_seq = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """An n-dimensional float array plus optional gradient bookkeeping.

    ``data`` is a numpy array (row-major). Leaves created with
    ``requires_grad=True`` start with a zeroed ``grad`` buffer, so leaves that
    do not contribute to a loss end up with an all-zero gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_seq")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        _parents: tuple = (),
        _op: str = "leaf",
        _backward: Optional[BackwardFn] = None,
    ):
        self.data = _as_float_array(data)
        self.requires_grad = bool(requires_grad)
        self.op = _op
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_seq)
        self.grad = np.zeros_like(self.data) if (requires_grad and not _parents) else None

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation --------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = graph_nodes(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Grad-requiring nodes reachable from ``root``, in construction order."""
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(t._parents)
    out.sort(key=lambda t: t._seq)
    return out


def _lift(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents: tuple, op: str, backward: BackwardFn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _op=op, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise and reductions ------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may broadcast against ``a`` (e.g. a bias row)."""
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a.dtype)
    out = a.data + b.data
    return _node(out, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product. A non-Tensor ``b`` is a constant (no gradient)."""
    if isinstance(b, Tensor):
        out = a.data * b.data
        return _node(out, (a, b), "mul",
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))
    c = np.asarray(b, dtype=a.dtype)
    return _node(a.data * c, (a,), "mul", lambda g: (_unbroadcast(g * c, a.shape),))


def tsum(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), "sum",
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _node(np.asarray(a.data.mean(), dtype=a.dtype), (a,), "mean",
                 lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    return _node(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis but the first (batch) one."""
    return reshape(a, (a.shape[0], -1 if a.size else 0))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _node(out, (a,), "relu", lambda g: (g * (a.data > 0),))


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), "matmul", backward)


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: N,C,H+2,W+2 -> (N*H*W, 9*C), column order (ki, kj, c)
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
    return win.transpose(0, 2, 3, 4, 5, 1).reshape(n * h * w, 9 * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (output keeps H and W)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and FC33 kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d supports 3x3 kernels only, got {kernel.shape}")
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {f} filters")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, w)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(f, 9 * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, f).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * w, f)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gm.T @ cols).reshape(f, 3, 3, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, h, w, 3, 3, c)
            # accumulate in NHWC so each of the 9 taps adds a plain slice
            gxp = np.zeros((n, h + 2, w + 2, c), dtype=xp.dtype)
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _node(np.ascontiguousarray(out), parents, "conv2d", backward)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Gradient goes to the first maximal element of each window in row-major order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2 expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {x.shape}")
    d = x.data
    corners = (d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def backward(g):
        gx = np.zeros_like(d)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = corners[k] == out
            hit &= ~taken
            taken |= hit
            gx[:, :, i::2, j::2] = g * hit
        return (gx,)

    return _node(out, (x,), "max_pool2", backward)


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"log_softmax expects an N x K matrix, got {logits.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericError("log_softmax received non-finite logits")
    shifted = z - z.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _node(out, (logits,), "log_softmax", backward)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    """Plain numpy row softmax (no graph); for scores and constant targets."""
    z = np.asarray(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
