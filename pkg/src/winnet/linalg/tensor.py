"""Dense float tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array together with an optional gradient buffer
and a record of the operation that produced it.  Calling :func:`backward`
on a scalar result walks the recorded graph in reverse topological order
and accumulates ``d(loss)/d(tensor)`` into ``.grad`` of every tensor that
has ``requires_grad`` set.

Only the operations needed by the denoising networks are provided; there
is no general broadcasting beyond what those operations use.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operands violate an operation's shape contract."""


_grad_enabled = True


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = bool(mode)
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    """Disable graph recording inside the context (inference / power iteration)."""
    return set_grad_enabled(False)


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- gradient bookkeeping ------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, n):
        if n != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    """Wrap operands, keeping a bare python scalar in the tensor's dtype so
    float32 graphs are not silently promoted to float64."""
    if isinstance(a, Tensor):
        if not isinstance(b, Tensor):
            b = Tensor(b, dtype=a.dtype if np.isscalar(b) else None)
        return a, b
    if isinstance(b, Tensor):
        a = Tensor(a, dtype=b.dtype if np.isscalar(a) else None)
        return a, b
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the graph edge when gradients are on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _toposort(loss: Tensor):
    # Iterative: training graphs are deep enough to overflow Python recursion.
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(loss: Tensor, sink):
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        sink(node, g)
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def backward(loss: Tensor):
    """Populate ``.grad`` of every tracked tensor reachable from ``loss``.

    ``loss`` must be scalar.  Repeated calls accumulate; clear grads between
    optimizer steps.
    """
    _backprop(loss, lambda node, g: node.accumulate_grad(g))


def grad_wrt(loss: Tensor, tensors):
    """Gradients of a scalar ``loss`` w.r.t. ``tensors`` without touching ``.grad``.

    Returns a list of arrays (``None`` where a tensor is unreachable).
    """
    wanted = {id(t): i for i, t in enumerate(tensors)}
    found: dict = {}

    def sink(node, g):
        i = wanted.get(id(node))
        if i is not None:
            found[i] = found[i] + g if i in found else g.copy()

    _backprop(loss, sink)
    return [found.get(i) for i in range(len(tensors))]


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _make(out, (x,), bwd)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def bwd(g):
        return (g * (0.5 / np.maximum(out, np.finfo(out.dtype).tiny)),)

    return _make(out, (x,), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # tanh form is stable for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bwd)


def softplus(theta, beta: float = 1.0) -> Tensor:
    """(1/beta) * log(1 + exp(beta * theta)); strictly positive, overflow-safe."""
    if beta <= 0:
        raise ValueError(f"softplus beta must be positive, got {beta}")
    theta = as_tensor(theta)
    out = np.logaddexp(0.0, beta * theta.data) / beta

    def bwd(g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * beta * theta.data)),)

    return _make(out, (theta,), bwd)


def soft_threshold(x, lam) -> Tensor:
    """Shrinkage sgn(x) * max(|x| - lam, 0) with per-channel broadcast of lam.

    The dead zone is closed: the subgradient at |x| <= lam is zero for both
    operands.
    """
    x, lam = _pair(x, lam)
    if np.any(lam.data < 0):
        raise ValueError("soft_threshold requires non-negative thresholds")
    mag = np.abs(x.data) - lam.data
    active = mag > 0
    sign = np.sign(x.data)
    out = np.where(active, sign * mag, 0.0).astype(x.dtype)

    def bwd(g):
        gx = g * active
        gl = _unbroadcast(np.where(active, -sign * g, 0.0), lam.shape)
        return gx, gl

    return _make(out, (x, lam), bwd)


# -- shape manipulation ---------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bwd)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), bwd)


def flip(x, axes) -> Tensor:
    x = as_tensor(x)
    out = np.flip(x.data, axes).copy()

    def bwd(g):
        return (np.flip(g, axes).copy(),)

    return _make(out, (x,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _make(out, tuple(parts), bwd)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries of ``axis`` starting at ``start``."""
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(out, (x,), bwd)


def pad2d(x, pads) -> Tensor:
    """Zero-pad the two trailing axes by (top, bottom, left, right)."""
    x = as_tensor(x)
    top, bottom, left, right = pads
    width = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(x.data, width)
    sl = (Ellipsis, slice(top, top + x.shape[-2]), slice(left, left + x.shape[-1]))

    def bwd(g):
        return (g[sl].copy(),)

    return _make(out, (x,), bwd)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd)


def inverse(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("inverse expects a square matrix")
    out = np.linalg.inv(a.data)

    def bwd(g):
        # d(A^-1) = -A^-1 dA A^-1
        return (-out.T @ g @ out.T,)

    return _make(out, (a,), bwd)


def frobenius_sq(x) -> Tensor:
    """Sum of squared entries as a scalar tensor."""
    return tsum(mul(x, x))
