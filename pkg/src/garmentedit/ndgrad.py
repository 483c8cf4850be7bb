"""Dense numpy tensors with reverse-mode automatic differentiation.

Every differentiable computation in the package is built from the functions
in this module.  A :class:`Tensor` wraps an immutable ``numpy`` array; when any
input requires a gradient, the result remembers its parents and a closure that
maps the output gradient to the input gradients.  :func:`backward` orders the
recorded nodes topologically and walks them once in reverse.

Broadcasting follows numpy's trailing-dimension rule.  Gradients flowing into
a broadcast operand are summed back down to its shape.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import numbers

import numpy as np

from .errors import (
    DetachedTensor,
    DomainError,
    EmptyReduction,
    InvalidAxis,
    NonFiniteError,
    NotScalar,
    ShapeMismatch,
)

__all__ = [
    "Tensor",
    "GradMap",
    "tensor",
    "constant",
    "parameter",
    "no_grad",
    "set_default_dtype",
    "get_default_dtype",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "pow",
    "sqrt",
    "relu",
    "silu",
    "matmul",
    "softmax_axis",
    "reduce",
    "sum",
    "mean",
    "l2norm",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "stop_gradient",
    "backward",
]

DIV_TOL = 1e-12

_ids = itertools.count()
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_default_dtype = np.float64


def set_default_dtype(dtype):
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """An immutable array that may take part in gradient recording.

    ``node_id`` is unique per tensor and keys the result of :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "node_id", "op", "_parents", "_backward")
    # make numpy scalars and arrays defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype, copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, arr, parents, backward_fn, op):
        out = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.dtype != _default_dtype and arr.dtype.kind == "f":
            arr = arr.astype(_default_dtype)
        arr.setflags(write=False)
        out.data = arr
        out.node_id = next(_ids)
        out.op = op
        track = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward_fn if track else None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __pow__(self, other):
        return pow(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

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

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def detach(self):
        return stop_gradient(self)


class GradMap(dict):
    """Mapping ``node_id -> Tensor`` returned by :func:`backward`.

    Indexing with a :class:`Tensor` looks up its ``node_id``.  A trainable
    tensor that the loss does not depend on reads as zeros.
    """

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            if key.node_id in self:
                return dict.__getitem__(self, key.node_id)
            if key.requires_grad:
                return Tensor(np.zeros_like(key.data))
            raise KeyError(f"tensor {key.node_id} does not require grad")
        return dict.__getitem__(self, key)


def tensor(data, requires_grad=False, dtype=None):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, dtype)


def constant(data):
    return Tensor(data, requires_grad=False)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (numbers.Number, np.ndarray, list, tuple, np.generic)):
        return Tensor(x)
    raise TypeError(f"cannot convert {type(x).__name__} to Tensor")


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeMismatch(f"shapes {shapes} are not broadcastable") from exc


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    if np.any(np.abs(b.data) < DIV_TOL):
        raise DomainError("division by a value within 1e-12 of zero")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw, "div")


def neg(a):
    a = _as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    out = _sigmoid_np(np.asarray(a.data, dtype=float))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def pow(a, b):
    """``a ** b`` for a tensor base and a scalar or tensor exponent."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    integral = np.all(np.equal(np.mod(b.data, 1.0), 0.0))
    if np.any(a.data < 0) and not integral:
        raise DomainError("negative base with a non-integer exponent")
    if b.requires_grad and np.any(a.data <= 0):
        raise DomainError("exponent gradient needs a positive base")
    if np.any((a.data == 0) & (b.data < 0)):
        raise DomainError("zero raised to a negative power")
    with np.errstate(over="ignore"):
        out = np.power(a.data, b.data)
    _check_finite(out, "pow")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                local = b.data * np.power(a.data, b.data - 1.0)
            local = np.where(b.data == 0, 0.0, local)
            ga = _unbroadcast(g * local, a.shape)
        if b.requires_grad:
            gb = _unbroadcast(g * out * np.log(a.data), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), bw, "pow")


def sqrt(a):
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bw(g):
        if np.any(out == 0):
            raise DomainError("sqrt gradient at zero")
        return (g * 0.5 / out,)

    return Tensor._result(out, (a,), bw, "sqrt")


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def silu(a):
    """``x * sigmoid(x)``; a smooth activation for the mapper MLPs."""
    a = _as_tensor(a)
    s = _sigmoid_np(np.asarray(a.data, dtype=float))
    out = a.data * s
    return Tensor._result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


_UNARY = {"exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid, "sqrt": sqrt, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": pow}


def elementwise(kind, a, b=None):
    """Dispatch by name: ``elementwise("mul", x, y)``."""
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} takes two operands")
        return _BINARY[kind](a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    out = []
    for ax in axes:
        if not isinstance(ax, (int, np.integer)) or not -ndim <= ax < ndim:
            raise InvalidAxis(f"axis {ax} invalid for rank {ndim}")
        out.append(int(ax) % ndim)
    return tuple(sorted(set(out)))


def softmax_axis(x, axis):
    """Softmax along ``axis`` with max subtraction."""
    x = _as_tensor(x)
    if x.ndim == 0:
        raise InvalidAxis("softmax of a scalar")
    (ax,) = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return Tensor._result(out, (x,), bw, "softmax")


def _expand_reduced(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    if x.size == 0:
        raise EmptyReduction("sum over an empty tensor")
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return Tensor._result(
        out, (x,), lambda g: (_expand_reduced(g, x.shape, axes, keepdims),), "sum"
    )


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise EmptyReduction("mean over an empty axis")
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return Tensor._result(
        out, (x,), lambda g: (_expand_reduced(g, x.shape, axes, keepdims) / count,), "mean"
    )


def l2norm(x, axis=None, keepdims=False):
    """Euclidean norm.  At an exactly zero input the gradient is taken as 0."""
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    if x.size == 0:
        raise EmptyReduction("norm of an empty tensor")
    out = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=keepdims))

    def bw(g):
        n = _expand_reduced(out, x.shape, axes, keepdims)
        gg = _expand_reduced(g, x.shape, axes, keepdims)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gg * x.data / safe, 0.0),)

    return Tensor._result(out, (x,), bw, "l2norm")


_REDUCE = {"sum": sum, "mean": mean, "l2norm": l2norm}


def reduce(kind, x, axis=None, keepdims=False):
    try:
        fn = _REDUCE[kind]
    except KeyError:
        raise ValueError(f"unknown reduction {kind!r}") from None
    return fn(x, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % max(x.ndim, 1) for a in axes) != list(range(x.ndim)):
        raise InvalidAxis(f"bad permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return Tensor._result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(i, (slice, numbers.Integral, type(None), type(Ellipsis))) for i in items
    )


def getitem(x, index):
    x = _as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data
    out = x.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (x,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of nothing")
    (ax,) = _norm_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(out, tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def stop_gradient(x):
    x = _as_tensor(x)
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Gradients of a scalar ``loss`` for every trainable leaf it depends on.

    Returns a :class:`GradMap`.  Calling it twice on the same graph gives the
    same result; nothing on the graph is mutated.
    """
    if not isinstance(loss, Tensor):
        raise DetachedTensor("loss is not a Tensor")
    if loss.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedTensor("loss does not depend on any trainable tensor")

    order = _topological(loss)
    pending = {loss.node_id: np.ones_like(loss.data)}
    leaves = GradMap()
    for node in reversed(order):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if not node._parents:
            leaves[node.node_id] = Tensor(g)
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in pending:
                pending[parent.node_id] = pending[parent.node_id] + pg
            else:
                pending[parent.node_id] = np.asarray(pg)
    return leaves
