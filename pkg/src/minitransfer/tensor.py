"""Dense float64 tensors with a reverse-mode differentiation record.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient (and gradients are enabled) the output keeps references to its
parents plus a closure mapping the upstream gradient to per-parent
gradients. :func:`backward` linearises that graph into a :class:`Tape`
and walks it in reverse.

Only :class:`Parameter` leaves accumulate gradients persistently; the
caller zeroes them between steps.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, LabelIndexError, NumericError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, op="const", requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable leaf. ``grad`` has the value's shape."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64), op="param", requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward_fn, op, True)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeNode:
    index: int
    op: str
    parents: tuple
    value: np.ndarray


@dataclass
class Tape:
    """Topologically ordered record of the graph reachable from a root."""

    nodes: list = field(default_factory=list)
    parameters: set = field(default_factory=set)
    tensors: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order, index = [], {}
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if id(t) in index:
                continue
            if expanded:
                index[id(t)] = len(order)
                order.append(t)
                continue
            stack.append((t, True))
            for p in t.parents:
                if p.requires_grad and id(p) not in index:
                    stack.append((p, False))
        tape = cls(tensors=order)
        for i, t in enumerate(order):
            parents = tuple(index[id(p)] for p in t.parents if id(p) in index)
            tape.nodes.append(TapeNode(i, t.op, parents, t.data))
            if isinstance(t, Parameter):
                tape.parameters.add(i)
        return tape


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(param) into every reachable Parameter."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape()
    tape = Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if isinstance(t, Parameter):
            t.grad = t.grad + g
            continue
        if t.backward_fn is None:
            continue
        for p, pg in zip(t.parents, t.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        # subgradient 0 at the origin keeps zero vectors finite
        return (np.divide(0.5 * g, out, out=np.zeros_like(out), where=out > 0),)

    return _result(out, (a,), bw, "sqrt")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    a = as_tensor(a)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def grad_reverse(x, lam: float):
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    x = as_tensor(x)
    scale = -float(lam)
    return _result(x.data.copy(), (x,), lambda g: (g * scale,), "grad_reverse")


def detach(x):
    return Tensor(as_tensor(x).data.copy(), op="detach")


ACTIVATIONS = {"none": lambda x: x, "relu": relu, "tanh": tanh}


# ---------------------------------------------------------------------------
# shape / reduction


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swap_last(a):
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),),
                   "transpose")


def getitem(a, index):
    a = as_tensor(a)

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in idx)

    def bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), bw, "getitem")


def take(a, indices, axis=0):
    """Gather along ``axis`` (embedding lookup when ``a`` is a table)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if axis != 0:
        raise DimensionError("take only supports axis=0")
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise LabelIndexError(f"take: index out of range for table of {a.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, indices.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return (out,)

    return _result(a.data[indices], (a,), bw, "take")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw,
                   "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax needs a non-empty last axis")
    y = _softmax(x.data)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


def log_softmax(x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("log_softmax needs a non-empty last axis")
    y = _log_softmax(x.data)
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        dy = g * gamma.data
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True)
                    - xhat * (dy * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# losses


def _check_labels(labels, n):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise LabelIndexError(f"label out of range [0, {n}): {labels.min()}..{labels.max()}")
    return labels


def nll(logits, labels):
    """Per-example negative log-likelihood, shape [b]."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"nll expects [b, n] logits, got {logits.shape}")
    b, n = logits.shape
    labels = _check_labels(labels, n)
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    lsm = _log_softmax(logits.data)
    rows = np.arange(b)

    def bw(g):
        grad = np.exp(lsm)
        grad[rows, labels] -= 1.0
        return (grad * g[:, None],)

    return _result(-lsm[rows, labels], (logits,), bw, "nll")


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [b, n] logits, got {logits.shape}")
    b, n = logits.shape
    labels = _check_labels(labels, n)
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    lsm = _log_softmax(logits.data)
    rows = np.arange(b)

    def bw(g):
        grad = np.exp(lsm)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return _result(-lsm[rows, labels].mean(), (logits,), bw, "cross_entropy")


def kl_soft(teacher_logits, student_logits, T: float):
    """Batch mean of KL(softmax(t/T) || softmax(s/T)); teacher side is detached."""
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    teacher_logits, student_logits = as_tensor(teacher_logits), as_tensor(student_logits)
    if teacher_logits.shape != student_logits.shape:
        raise DimensionError(
            f"kl_soft: shapes differ {teacher_logits.shape} vs {student_logits.shape}")
    log_p = _log_softmax(teacher_logits.data * (1.0 / T))
    p = np.exp(log_p)
    log_q = log_softmax(student_logits * (1.0 / T))
    b = student_logits.shape[0]
    plogp = np.where(p > 0, p * log_p, 0.0)
    return (tsum(plogp) - tsum(mul(p, log_q))) * (1.0 / b)


def l2_normalize(x, eps=1e-12):
    """x / (||x|| + eps) along the last axis."""
    x = as_tensor(x)
    norm = sqrt(tsum(square(x), axis=-1, keepdims=True))
    return x / (norm + eps)
