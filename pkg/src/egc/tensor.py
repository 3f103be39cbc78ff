"""Dense float64 tensors with reverse-mode autodiff.

Backward rules are written in terms of :class:`Tensor` operations, so running
a backward pass with ``create_graph=True`` records a new graph and the
resulting gradients can be differentiated again.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GradError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "grad",
    "matmul",
    "conv2d",
    "logsumexp",
    "silu",
    "softplus",
    "sigmoid",
    "square",
    "exp",
    "log",
    "sqrt",
    "softmax",
    "log_softmax",
    "im2col",
    "col2im",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GradError(RuntimeError):
    """Backward was requested on something that cannot be differentiated."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


class Node:
    """One recorded op: its parents and the rule mapping output grad to input grads."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _check_finite(np.asarray(data, dtype=np.float64), op)
        out.name = None
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out.node = Node(op, parents, backward_fn) if needs else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if self.node is not None:
            raise GradError("requires_grad_ is only valid on leaf tensors")
        self.requires_grad = flag
        return self

    def __repr__(self) -> str:
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{extra})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else _axis_count(self.shape, axis)
        return scale(sum_(self, axis=axis, keepdims=keepdims), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def expand(self, shape):
        return broadcast_to(self, tuple(shape))

    def square(self):
        return square(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _axis_count(shape, axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar or equal shapes broadcast)")


def _reduce_scalar(g: Tensor, like: Tensor) -> Tensor:
    if g.shape == like.shape:
        return g
    return sum_(g)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(g):
        return _reduce_scalar(g, a), _reduce_scalar(g, b)

    return Tensor._from_op(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _reduce_scalar(g, a), _reduce_scalar(-g, b)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bw(g):
        return _reduce_scalar(g * b, a), _reduce_scalar(g * a, b)

    return Tensor._from_op(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (no gradient flows to ``c``)."""
    c = float(c)

    def bw(g):
        return (scale(g, c),)

    return Tensor._from_op(a.data * c, "scale", (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        return (g * scale(a, 2.0),)

    return Tensor._from_op(a.data * a.data, "square", (a,), bw)


def exp(a: Tensor) -> Tensor:
    def bw(g):
        return (g * out,)

    out = Tensor._from_op(np.exp(a.data), "exp", (a,), bw)
    return out


def reciprocal(a: Tensor) -> Tensor:
    def bw(g):
        return (-(g * square(out)),)

    out = Tensor._from_op(1.0 / a.data, "reciprocal", (a,), bw)
    return out


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("sqrt of a non-positive value")

    def bw(g):
        return (scale(g * reciprocal(out), 0.5),)

    out = Tensor._from_op(np.sqrt(a.data), "sqrt", (a,), bw)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")

    def bw(g):
        return (g * reciprocal(a),)

    return Tensor._from_op(np.log(a.data), "log", (a,), bw)


def sign(a: Tensor) -> Tensor:
    """Sign with zero derivative; returned detached."""
    return Tensor(np.sign(a.data))


# Smooth activations and their derivatives as closed forms. Order k of
# family f evaluates d^k f / dx^k; its backward rule uses order k+1.


def _sig(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu_derivs(x: np.ndarray, k: int) -> np.ndarray:
    s = _sig(x)
    d = s * (1.0 - s)
    if k == 0:
        return x * s
    if k == 1:
        return s + x * d
    if k == 2:
        return d * (2.0 + x * (1.0 - 2.0 * s))
    if k == 3:
        return d * ((1.0 - 2.0 * s) * (3.0 + x * (1.0 - 2.0 * s)) - 2.0 * x * d)
    if k == 4:
        u = 1.0 - 2.0 * s
        # d' = d*u, u' = -2d
        # f3 = d*(u*(3 + x*u) - 2*x*d)
        inner = u * (3.0 + x * u) - 2.0 * x * d
        inner_p = -2.0 * d * (3.0 + x * u) + u * (u + x * (-2.0 * d)) - 2.0 * d - 2.0 * x * d * u
        return d * u * inner + d * inner_p
    raise NotImplementedError(f"silu derivative of order {k}")


def _softplus_derivs(x: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return np.logaddexp(0.0, x)
    s = _sig(x)
    if k == 1:
        return s
    d = s * (1.0 - s)
    if k == 2:
        return d
    if k == 3:
        return d * (1.0 - 2.0 * s)
    if k == 4:
        return d * ((1.0 - 2.0 * s) ** 2 - 2.0 * d)
    raise NotImplementedError(f"softplus derivative of order {k}")


def _sigmoid_derivs(x: np.ndarray, k: int) -> np.ndarray:
    return _softplus_derivs(x, k + 1)


_SMOOTH = {"silu": _silu_derivs, "softplus": _softplus_derivs, "sigmoid": _sigmoid_derivs}


def _smooth(a: Tensor, family: str, order: int) -> Tensor:
    fn = _SMOOTH[family]

    def bw(g):
        return (g * _smooth(a, family, order + 1),)

    name = family if order == 0 else f"{family}^({order})"
    return Tensor._from_op(fn(a.data, order), name, (a,), bw)


def silu(a: Tensor) -> Tensor:
    return _smooth(a, "silu", 0)


def softplus(a: Tensor) -> Tensor:
    return _smooth(a, "softplus", 0)


def sigmoid(a: Tensor) -> Tensor:
    return _smooth(a, "sigmoid", 0)


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, silu, softplus, square."""
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        return {"add": add, "sub": sub, "mul": mul}[op](a, b)
    if op == "scale":
        if isinstance(b, Tensor):
            return mul(a, b)
        return scale(_as_tensor(a), b)
    unary = {"silu": silu, "softplus": softplus, "square": square}
    if op not in unary:
        raise ValueError(f"unknown elementwise op {op!r}")
    return unary[op](_as_tensor(a))


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(in_shape) for ax in axes)
            kshape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))
            g = reshape(g, kshape)
        elif axis is None:
            g = reshape(g, (1,) * len(in_shape))
        return (broadcast_to(g, in_shape),)

    return Tensor._from_op(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.shape

    def bw(g):
        return (reshape(g, in_shape),)

    return Tensor._from_op(a.data.reshape(shape), "reshape", (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (transpose(g, inv),)

    return Tensor._from_op(np.transpose(a.data, axes), "transpose", (a,), bw)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit numpy-style broadcast; the backward rule sums back down."""
    in_shape = a.shape
    if in_shape == tuple(shape):
        return a

    def bw(g):
        return (sum_to(g, in_shape),)

    return Tensor._from_op(np.broadcast_to(a.data, shape).copy(), "broadcast", (a,), bw)


def sum_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if a.shape == tuple(shape):
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1
    )
    out = sum_(a, axis=axes, keepdims=True)
    return reshape(out, shape)


def index(a: Tensor, idx) -> Tensor:
    in_shape = a.shape

    def bw(g):
        return (_scatter(g, idx, in_shape),)

    return Tensor._from_op(a.data[idx], "index", (a,), bw)


def _scatter(g: Tensor, idx, shape) -> Tensor:
    def bw(gg):
        return (index(gg, idx),)

    out = np.zeros(shape)
    np.add.at(out, idx, g.data)
    return Tensor._from_op(out, "scatter", (g,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * data.ndim
            sl[ax] = slice(int(lo), int(hi))
            parts.append(index(g, tuple(sl)))
        return tuple(parts)

    return Tensor._from_op(data, "concat", tuple(tensors), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return Tensor._from_op(a.data @ b.data, "matmul", (a, b), bw)


def logsumexp(v: Tensor, axis: int = -1) -> Tensor:
    """Stable ``log(sum(exp(v)))`` over ``axis``; the gradient is ``softmax(v)``."""
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError("logsumexp over an empty axis")
    m = np.max(v.data, axis=axis, keepdims=True)
    val = np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(v.data - m), axis=axis))
    in_shape = v.shape
    ax = axis % v.ndim
    kshape = tuple(1 if i == ax else n for i, n in enumerate(in_shape))

    def bw(g):
        lse = broadcast_to(reshape(out, kshape), in_shape)
        p = exp(v - lse)
        return (broadcast_to(reshape(g, kshape), in_shape) * p,)

    out = Tensor._from_op(val, "logsumexp", (v,), bw)
    return out


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    ax = axis % v.ndim
    kshape = tuple(1 if i == ax else n for i, n in enumerate(v.shape))
    return v - broadcast_to(reshape(logsumexp(v, axis=ax), kshape), v.shape)


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(v, axis=axis))


# ---------------------------------------------------------------------------
# convolution via explicit patch extraction
# ---------------------------------------------------------------------------


def _patch_index(c: int, h: int, w: int, k: int, stride: int, padding: int):
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"kernel {k} larger than padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = ki.reshape(-1, 1) + stride * oi.reshape(1, -1)
    cols = kj.reshape(-1, 1) + stride * oj.reshape(1, -1)
    chans = np.broadcast_to(ci.reshape(-1, 1), rows.shape)
    return chans, rows, cols, ho, wo


def im2col(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """(b, c, h, w) -> (b, c*k*k, ho*wo) patch matrix; adjoint of :func:`col2im`."""
    b, c, h, w = x.shape
    chans, rows, cols, _, _ = _patch_index(c, h, w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    data = xp[:, chans, rows, cols]

    def bw(g):
        return (col2im(g, (b, c, h, w), k, stride, padding),)

    return Tensor._from_op(data, "im2col", (x,), bw)


def col2im(cols_t: Tensor, shape, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Scatter-add patches back to an image; adjoint of :func:`im2col`."""
    b, c, h, w = shape
    chans, rows, cols, _, _ = _patch_index(c, h, w, k, stride, padding)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    # loop over patch rows keeps the accumulation order fixed
    for r in range(chans.shape[0]):
        np.add.at(out, (slice(None), chans[r], rows[r], cols[r]), cols_t.data[:, r, :])
    out = out[:, :, padding : padding + h, padding : padding + w]

    def bw(g):
        return (im2col(g, k, stride, padding),)

    return Tensor._from_op(out, "col2im", (cols_t,), bw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct cross-correlation, ``x`` is (b, c, h, w), ``kernel`` is (o, c, k, k)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    b, c, h, w = x.shape
    o, kc, k, k2 = kernel.shape
    if kc != c or k != k2:
        raise ShapeError(f"conv2d: kernel {kernel.shape} does not match input {x.shape}")
    _, _, _, ho, wo = _patch_index(c, h, w, k, stride, padding)
    cols = im2col(x, k, stride, padding)  # b, ckk, L
    L = ho * wo
    flat = reshape(transpose(cols, (1, 0, 2)), (c * k * k, b * L))
    out = matmul(reshape(kernel, (o, c * k * k)), flat)  # o, b*L
    return transpose(reshape(out, (o, b, ho, wo)), (1, 0, 2, 3))


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in reversed(t.node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order  # parents before children


def _run_backward(root: Tensor, targets: Iterable[Tensor] | None, create_graph: bool) -> dict[int, Tensor]:
    if root.size != 1:
        raise GradError(f"backward needs a single-element output, got shape {root.shape}")
    if not root.requires_grad:
        raise GradError("backward on a tensor that is not connected to any requires_grad input")
    order = _toposort(root)
    if targets is not None:
        want = {id(t) for t in targets}
        needed: set[int] = set()
        for t in order:
            if id(t) in want or (t.node is not None and any(id(p) in needed for p in t.node.parents)):
                needed.add(id(t))
    else:
        needed = {id(t) for t in order}

    grads: dict[int, Tensor] = {}
    with _grad_mode(create_graph):
        grads[id(root)] = Tensor(np.ones_like(root.data))
        for t in reversed(order):
            g = grads.get(id(t))
            if g is None or t.node is None:
                continue
            parent_grads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not p.requires_grad or id(p) not in needed:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"{t.node.op} backward produced {pg.shape} for input {p.shape}")
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    return grads


def backward(loss: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Gradients of a scalar with respect to every ``requires_grad`` leaf it depends on.

    Returns a mapping keyed by the leaf tensors themselves (identity-hashed).
    With ``create_graph`` the gradients are graph-connected.
    """
    grads = _run_backward(loss, None, create_graph)
    out: dict[Tensor, Tensor] = {}
    for t in _toposort(loss):
        if t.node is None and t.requires_grad:
            g = grads.get(id(t))
            out[t] = g if g is not None else Tensor(np.zeros_like(t.data))
    return out


def grad(loss: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar with respect to ``inputs`` (leaves or interior nodes)."""
    for x in inputs:
        if not x.requires_grad:
            raise GradError("grad requested for a tensor that does not require grad")
    grads = _run_backward(loss, inputs, create_graph)
    return [grads.get(id(x), Tensor(np.zeros_like(x.data))) for x in inputs]
