"""A small reverse-mode automatic differentiation engine on numpy arrays.

Only the operations the channel predictor needs are provided.  Tensors may
carry leading batch axes; weights are plain 2-D or 1-D tensors that
broadcast over those axes, and their gradients are summed accordingly.

Example
-------
>>> W = Tensor(np.ones((3, 2)), requires_grad=True)
>>> x = Tensor(np.arange(3.0)[None])
>>> loss = sum_all(matmul(x, W))
>>> loss.backward()
>>> W.grad
array([[0., 0.],
       [1., 1.],
       [2., 2.]])
"""

from __future__ import annotations

import contextlib
from collections import defaultdict

import numpy as np

_grad_enabled = True
_mult_counter = None
_scope = []


class Tensor:
    """Dense array with an optional gradient buffer and a link into the backward graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype.kind not in "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` over axes that were broadcast."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def scope(label: str):
    """Tag matmuls executed inside the block for multiplication accounting."""
    _scope.append(label)
    try:
        yield
    finally:
        _scope.pop()


class MultCounter:
    """Tally of scalar multiplications performed by matmuls, keyed by scope label."""

    def __init__(self):
        self.by_scope = defaultdict(int)

    def add(self, n):
        key = "/".join(_scope) if _scope else ""
        self.by_scope[key] += int(n)

    @property
    def total(self):
        return sum(self.by_scope.values())

    def total_where(self, predicate):
        return sum(v for k, v in self.by_scope.items() if predicate(k))


@contextlib.contextmanager
def count_mults():
    """Record the number of scalar multiplications in every matmul inside the block."""
    global _mult_counter
    prev = _mult_counter
    counter = MultCounter()
    _mult_counter = counter
    try:
        yield counter
    finally:
        _mult_counter = prev


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape [..., m, k] and ``b`` of shape [k, n] or [..., k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if _mult_counter is not None:
        _mult_counter.add(out.size * a.shape[-1])

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), _bw, "matmul")


def _check_add_shapes(x, y, op):
    if x.shape != y.shape and y.shape != x.shape[-1:]:
        raise ValueError(f"{op}: shapes {x.shape} and {y.shape} are not compatible (same shape or bias row)")


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; ``y`` may also be a bias row matching the last axis of ``x``."""
    x, y = as_tensor(x), as_tensor(y)
    _check_add_shapes(x, y, "add")

    def _bw(g):
        return g, _unbroadcast(g, y.shape)

    return _make(x.data + y.data, (x, y), _bw, "add")


def sub(x: Tensor, y: Tensor) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_add_shapes(x, y, "sub")

    def _bw(g):
        return g, -_unbroadcast(g, y.shape)

    return _make(x.data - y.data, (x, y), _bw, "sub")


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of equal shapes (or ``y`` broadcastable onto ``x``)."""
    x, y = as_tensor(x), as_tensor(y)
    try:
        shape = np.broadcast_shapes(x.shape, y.shape)
    except ValueError as exc:
        raise ValueError(f"mul: shapes {x.shape} and {y.shape} do not broadcast") from exc
    if shape != x.shape:
        raise ValueError(f"mul: {y.shape} must broadcast onto {x.shape}")

    def _bw(g):
        return g * y.data, _unbroadcast(g * x.data, y.shape)

    return _make(x.data * y.data, (x, y), _bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(x, -1, -2)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"swapaxes needs rank >= 2, got {x.shape}")
    # contiguous copies keep later elementwise ops on fast memory layouts
    out = np.ascontiguousarray(np.swapaxes(x.data, a1, a2))
    return _make(out, (x,), lambda g: (np.ascontiguousarray(np.swapaxes(g, a1, a2)),), "swapaxes")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / max(as_tensor(x).data.size, 1))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every row (last axis) to zero mean and unit variance, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    if not eps > 0:
        raise ValueError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), _bw, "layer_norm")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), _bw, "softmax")


def concat_last(parts) -> Tensor:
    """Concatenate along the last axis."""
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[-1] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=-1))

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, _bw, "concat")


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def _bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop], (x,), _bw, "slice")


# ---------------------------------------------------------------- backward


def _topo_order(root):
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


def backward(loss: Tensor, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    The graph is released afterwards; calling ``backward`` on the same loss
    again raises ``RuntimeError``.
    """
    if loss._consumed:
        raise RuntimeError("backward() already called on this graph; rebuild it with a new forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad (detached graph)")
    if grad is None:
        if loss.data.size != 1:
            raise RuntimeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        # release the graph
        node._parents = ()
        node._backward = None
        node._consumed = True
    loss._consumed = True
