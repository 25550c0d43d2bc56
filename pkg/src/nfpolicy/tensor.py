"""Dense tensors with a reverse-mode tape and an Adam optimizer.

Every op computes its value eagerly with numpy.  When grad mode is on and at
least one input is tracked, the result keeps references to its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
that graph once in reverse topological order and then drops it.

Broadcasting is limited to python scalars and trailing bias-add; anything else
needs an explicit ``reshape``.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "TrainingDivergedError",
    "tensor", "constant", "no_grad", "grad_enabled", "precision", "default_dtype",
    "matmul", "add", "sub", "mul", "div", "neg", "concat", "split", "take",
    "take_along", "reshape", "sum", "mean", "tanh", "relu", "softmax", "softplus",
    "log", "exp", "sqrt", "square", "cumsum", "where", "backward",
    "AdamState", "adam_step", "Adam",
]


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class NonFiniteError(FloatingPointError):
    pass


class TrainingDivergedError(NonFiniteError):
    pass


_local = threading.local()
_dtype = [np.dtype(np.float32)]


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def default_dtype() -> np.dtype:
    return _dtype[0]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    float64 is only meant for finite-difference checks in tests.
    """
    prev = _dtype[0]
    _dtype[0] = np.dtype(dtype)
    try:
        yield
    finally:
        _dtype[0] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=_dtype[0])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def isfinite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _make(value, parents: Sequence, backward_fn: Callable, op: str) -> Tensor:
    tracked = grad_enabled() and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    if not tracked:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbias(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to a trailing-broadcast operand shape."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _check_binary(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if small.ndim == 0 or (small.ndim <= big.ndim and big.shape[big.ndim - small.ndim:] == small.shape):
        return
    raise ShapeError(op, a.shape, b.shape)


# --- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = constant(a)
        return _make(a.data + b, (a,), lambda g: (g,), "add")
    if _is_scalar(a):
        return add(b, a)
    a, b = constant(a), constant(b)
    _check_binary("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbias(g, sa), _unbias(g, sb)), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        a = constant(a)
        return _make(a.data - b, (a,), lambda g: (g,), "sub")
    if _is_scalar(a):
        b = constant(b)
        return _make(a - b.data, (b,), lambda g: (-g,), "sub")
    a, b = constant(a), constant(b)
    _check_binary("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbias(g, sa), -_unbias(g, sb)), "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = constant(a)
        return _make(a.data * b, (a,), lambda g: (g * b,), "mul")
    if _is_scalar(a):
        return mul(b, a)
    a, b = constant(a), constant(b)
    _check_binary("mul", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbias(g * b.data, sa), _unbias(g * a.data, sb)), "mul")


def div(a, b) -> Tensor:
    if _is_scalar(b):
        a = constant(a)
        return _make(a.data / b, (a,), lambda g: (g / b,), "div")
    if _is_scalar(a):
        b = constant(b)
        out = a / b.data
        return _make(out, (b,), lambda g: (-g * out / b.data,), "div")
    a, b = constant(a), constant(b)
    _check_binary("div", a, b)
    sa, sb = a.shape, b.shape
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbias(g / b.data, sa), _unbias(-g * out / b.data, sb)), "div")


def neg(a) -> Tensor:
    a = constant(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; ``mask`` is a constant."""
    a, b = constant(a), constant(b)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    if not (a.shape == b.shape == m.shape):
        raise ShapeError("where", m.shape, a.shape, b.shape)
    return _make(np.where(m, a.data, b.data), (a, b), lambda g: (g * m, g * ~m), "where")


# --- contraction, structure -------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [constant(x) for x in xs]
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError("concat", *(t.shape for t in xs))
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def split(x, sizes: Sequence[int], axis: int = -1) -> list:
    x = constant(x)
    ax = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[ax]:
        raise ShapeError("split", x.shape, tuple(sizes))
    out, start = [], 0
    for n in sizes:
        out.append(take(x, np.arange(start, start + n), axis=ax))
        start += n
    return out


def take(x, indices, axis: int = -1) -> Tensor:
    """Select entries along ``axis`` by integer index (used for coupling halves)."""
    x = constant(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    shape = x.shape
    unique = len(np.unique(idx)) == idx.size
    where_ = (slice(None),) * ax + (idx,)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if unique:
            full[where_] = g
        else:
            np.add.at(full, where_, g)
        return (full,)

    return _make(np.take(x.data, idx, axis=ax), (x,), bw, "take")


def take_along(x, indices: np.ndarray, axis: int = -1) -> Tensor:
    """Gather with an index array shaped like ``x`` except along ``axis``."""
    x = constant(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != x.ndim:
        raise ShapeError("take_along", x.shape, idx.shape)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if idx.shape[axis] == 1:
            np.put_along_axis(full, idx, g, axis=axis)
        else:
            # indices may repeat within a row, so accumulate rather than put
            _add_along_axis(full, idx, g, axis)
        return (full,)

    return _make(np.take_along_axis(x.data, idx, axis=axis), (x,), bw, "take_along")


def _add_along_axis(full: np.ndarray, idx: np.ndarray, g: np.ndarray, axis: int):
    ax = axis % full.ndim
    grids = list(np.indices(idx.shape, sparse=True))
    grids[ax] = idx
    np.add.at(full, tuple(grids), g)


def reshape(x, shape) -> Tensor:
    x = constant(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


# --- reductions -------------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = constant(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = constant(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def cumsum(x, axis: int = -1) -> Tensor:
    x = constant(x)
    return _make(np.cumsum(x.data, axis=axis), (x,),
                 lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),), "cumsum")


# --- elementwise unary ------------------------------------------------------

def tanh(x) -> Tensor:
    x = constant(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = constant(x)
    mask = x.data > 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def softmax(x, axis: int = -1) -> Tensor:
    x = constant(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def softplus(x) -> Tensor:
    x = constant(x)
    out = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * sig,), "softplus")


def log(x) -> Tensor:
    x = constant(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x) -> Tensor:
    x = constant(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x) -> Tensor:
    x = constant(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x) -> Tensor:
    x = constant(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


# --- backward ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    The graph below ``root`` is released afterwards.
    """
    if root.data.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.astype(node.data.dtype, copy=True) if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node.requires_grad = False


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: Iterable[np.ndarray], **kw) -> "AdamState":
        params = [np.asarray(p) for p in params]
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              maximize: bool = False) -> list:
    """One bias-corrected Adam update; returns new parameter arrays.

    ``maximize`` flips the gradient sign (gradient ascent).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step", (len(params),), (len(grads),), (len(state.m),))
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError("adam_step", np.shape(p), np.shape(g))
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient at Adam step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if maximize:
            g = -g
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append((p - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(np.asarray(p).dtype))
    return out


class Adam:
    """Adam over a list of leaf tensors; reads ``.grad`` and updates ``.data``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 maximize: bool = False):
        self.params = list(params)
        self.maximize = maximize
        self.state = AdamState.like((p.data for p in self.params), lr=lr, beta1=betas[0],
                                    beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adam_step([p.data for p in self.params], grads, self.state, maximize=self.maximize)
        for p, d in zip(self.params, new):
            p.data = d
