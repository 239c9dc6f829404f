"""Dense arrays with reverse-mode automatic differentiation.

Every differentiable operation records a node holding its parents and a
closure that maps the output adjoint to one adjoint per parent. The tape
is dynamic: it is rebuilt on each forward pass and consumed by exactly one
call to :meth:`Tensor.backward`.

Broadcasting follows numpy: trailing dimensions are aligned and size-1
extents expand. Adjoints of broadcast operands are summed back down to the
operand's shape.

Values are stored in float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import special
from .errors import GraphError, ShapeError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-dimensional float64 array that can take part in backprop.

    Args:
        data: anything ``np.asarray`` accepts.
        requires_grad: mark as a leaf whose gradient should be accumulated.
        name: optional label, used in error messages and checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    # ------------------------------------------------------------------ basics

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{rg})"

    def __len__(self):
        return len(self.data)

    # --------------------------------------------------------------- backprop

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor.

        Raises:
            GraphError: if ``self`` is not a scalar, does not require grad, or
                its graph has already been consumed by an earlier call.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")
        if not self.requires_grad:
            raise GraphError("root does not require grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True
        self._consumed = True

    # ------------------------------------------------------------- operators

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward, op):
    """Wrap ``data`` as the output of a primitive.

    ``backward`` receives the output adjoint and returns one adjoint (or
    None) per parent, each shaped like that parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out._consumed = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ----------------------------------------------------------- elementwise ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        gb = g / b.data
        return unbroadcast(gb, a.shape), unbroadcast(-gb * out, b.shape)

    return make_node(out, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    """``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(exponent)
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return make_node(out, (a,), backward, "pow")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs_(a):
    a = as_tensor(a)
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x):
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    """``log(1 + exp(a))`` in the overflow-free form ``max(a,0) + log1p(exp(-|a|))``."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return make_node(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def digamma(a):
    """Elementwise digamma; the adjoint uses trigamma."""
    a = as_tensor(a)
    x = a.data
    out = np.asarray(special.digamma(x))
    return make_node(out, (a,), lambda g: (g * special.trigamma(x),), "digamma")


def where(cond, a, b):
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return unbroadcast(np.where(cond, g, 0.0), a.shape), unbroadcast(np.where(cond, 0.0, g), b.shape)

    return make_node(out, (a, b), backward, "where")


# ------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward, "mean")


# ------------------------------------------------------------ linear algebra


def matmul(a, b):
    """Matrix product with numpy semantics for 2-D and batched operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions must agree")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_node(out, (a, b), backward, "matmul")


# ------------------------------------------------------------ shape ops


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def pad(a, pad_width):
    """Zero padding; ``pad_width`` as in ``np.pad``."""
    a = as_tensor(a)
    pw = np.broadcast_to(np.asarray(pad_width, dtype=int), (a.ndim, 2))
    out = np.pad(a.data, pw)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.shape))
    return make_node(out, (a,), lambda g: (g[crop].copy(),), "pad")


def getitem(a, index):
    """Basic or advanced indexing (slicing)."""
    a = as_tensor(a)
    out = a.data[index]

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out, dtype=DTYPE), (a,), backward, "slice")


slice_ = getitem


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(i != ax and x != y for i, (x, y) in enumerate(zip(t.shape, ref))):
            raise ShapeError("concat", ref, t.shape, detail=f"must agree except on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(out, tuple(tensors), backward, "concat")
