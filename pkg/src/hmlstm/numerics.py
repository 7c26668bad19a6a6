"""Dense tensors with a reverse-mode tape.

Operations are plain functions over :class:`Tensor`.  While a :class:`Tape`
is active, every operation whose inputs require gradients appends a node to
it; :meth:`Tape.backward` replays the nodes in reverse creation order.

    >>> W = Parameter("W", np.ones((2, 2)))
    >>> with Tape() as tape:
    ...     loss = sum_all(matmul(Tensor(np.eye(2)), W.value))
    >>> tape.backward(loss)
"""
from __future__ import annotations

import logging
import threading

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

__all__ = [
    "ShapeError", "Tensor", "Parameter", "Tape", "no_grad",
    "add", "sub", "mul", "neg", "matmul", "concat", "stack", "take", "reshape",
    "sigmoid", "tanh", "relu", "embedding", "hard_sigmoid",
    "straight_through_round", "layer_norm", "softmax_cross_entropy",
    "sum_all", "sum_squares", "log_softmax",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """An immutable array plus a flag saying whether gradients flow into it."""

    __slots__ = ("data", "requires_grad", "param")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.param = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter:
    """A named, trainable tensor with an accumulated gradient buffer.

    Values are stored C-contiguous: BLAS picks different kernels for other
    layouts, so a transposed array and its copy need not give bit-identical
    products.
    """

    def __init__(self, name, value, trainable=True):
        self.name = name
        self.value = Tensor(np.array(value, order="C"), requires_grad=trainable)
        self.value.param = self
        self.grad = np.zeros_like(self.value.data)
        self.trainable = trainable

    @property
    def data(self):
        return self.value.data

    @property
    def shape(self):
        return self.value.shape

    def assign(self, array):
        """Replace the value (outside any tape) keeping dtype and shape."""
        array = np.ascontiguousarray(array, dtype=self.value.data.dtype)
        if array.shape != self.value.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {array.shape} to {self.value.shape}")
        self.value.data = array

    def zero_grad(self):
        self.grad = np.zeros_like(self.value.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Records operations in creation order; confined to one thread."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_local, "tapes"):
            _local.tapes = []
        _local.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``."""
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
            raise ShapeError(f"backward needs a scalar loss, got shape {shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.param is not None:
                    if inp.param.trainable:
                        inp.param.grad += gi
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        if id(loss) in grads and loss.param is not None:
            loss.param.grad += grads[id(loss)]


class no_grad:
    """Suspend recording; operations inside produce constant tensors."""

    def __enter__(self):
        if not hasattr(_local, "tapes"):
            _local.tapes = []
        _local.tapes.append(None)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data, inputs, backward):
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        tape = _active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.nodes.append(_Node(inputs, out, backward))
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise ----------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b):
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward)


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


def sigmoid(a):
    y = expit(a.data)
    return _record(y, (a,), lambda g: (g * y * (1 - y),))


def tanh(a):
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1 - y * y),))


def relu(a):
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def hard_sigmoid(x, slope):
    """``max(0, min(1, slope * x + 0.5))``; gradient ``slope`` inside the ramp."""
    if not slope > 0:
        raise ValueError(f"hard_sigmoid slope must be > 0, got {slope}")
    lin = slope * x.data + 0.5
    inside = (lin > 0) & (lin < 1)
    y = np.clip(lin, 0, 1).astype(x.dtype)
    return _record(y, (x,), lambda g: (g * (slope * inside).astype(g.dtype),))


def straight_through_round(x, debug=False):
    """Round to {0, 1} going forward, identity going backward.

    An input of exactly 0.5 rounds up to 1.
    """
    data = x.data
    if debug and (np.any(data < 0) or np.any(data > 1)):
        logger.debug("straight_through_round: %d inputs outside [0, 1] clamped",
                     int(np.sum((data < 0) | (data > 1))))
    y = (data >= 0.5).astype(data.dtype)
    return _record(y, (x,), lambda g: (g,))


# --- linear algebra and structure ----------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward)


def concat(tensors, axis=-1):
    tensors = tuple(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def stack(tensors, axis=0):
    tensors = tuple(tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: shapes {tensors[0].shape} and {t.shape} differ")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def take(a, index):
    """Basic (slice/int) indexing."""
    try:
        y = a.data[index]
    except IndexError as err:
        raise ShapeError(f"slice {index!r} out of bounds for shape {a.shape}") from err

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(y, (a,), backward)


def reshape(a, shape):
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def embedding(table, ids):
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _record(table.data[ids], (table,), backward)


# --- reductions and losses ------------------------------------------------

def sum_all(a):
    return _record(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_squares(a):
    return _record(np.sum(a.data * a.data), (a,), lambda g: (2 * g * a.data,))


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each row of ``x`` over its last axis, then scale and shift."""
    n = x.shape[-1]
    if n == 0:
        raise ShapeError("layer_norm: zero-length normalization axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}")
    if not eps > 0:
        raise ValueError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gain.data + bias.data, (x, gain, bias), backward)


def log_softmax(logits):
    """Row-wise log-softmax of a raw array, stabilized by the row max."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, targets):
    """Mean negative log-likelihood (nats) of ``targets`` under row-softmax."""
    targets = np.asarray(targets).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != targets.size:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs {targets.size} targets")
    V = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"softmax_cross_entropy: target outside [0, {V})")
    logp = log_softmax(logits.data)
    rows = np.arange(targets.size)
    loss = -logp[rows, targets].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1
        return (d * (g / targets.size),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
