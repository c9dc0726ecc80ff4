"""Minimal define-by-run reverse-mode automatic differentiation on numpy.

Every operation records its parents and a closure that maps the gradient of
its output to gradients of its inputs.  ``Tensor.backward`` walks the
recorded graph once in reverse topological order.  The graph is rebuilt on
every forward pass, so models whose topology changes from step to step
(different modality subsets, different set sizes) need no special handling.

Only the operations the model needs are provided.  Broadcasting follows
numpy rules and gradients are summed back to the operand shapes.
"""

import contextlib
import threading

import numpy as np

from .errors import EmptySubsetError, NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

# Keeps the unit-variance property tight (|var - 1| < 1e-6 for rows with
# variance near one) while still guarding constant rows.
LAYER_NORM_EPS = 1e-8

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def resolve_dtype(precision):
    if isinstance(precision, str):
        try:
            return DTYPES[precision]
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")
    return np.dtype(precision).type


class Tensor:
    """An n-dimensional array that participates in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._released = False

    # -- basic introspection -------------------------------------------------
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

    @property
    def is_leaf(self):
        return self._op == "leaf"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op}{label})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- reverse pass --------------------------------------------------------
    def backward(self):
        """Populate ``.grad`` on every ``requires_grad`` leaf reachable from self.

        Leaf gradients accumulate across calls; interior nodes are released
        afterwards, so calling ``backward`` twice on the same graph raises.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise RuntimeError("backward called twice on the same graph; rebuild the forward pass first")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node._released:
                    raise RuntimeError("graph segment was already consumed by an earlier backward pass")
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
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
                node._released = True


def _topological_order(root):
    order, seen = [], set()
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"operation {op!r} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a):
    with np.errstate(over="ignore"):  # overflow is reported by _result as NumericError
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sigmoid_array(x):
    # Split on sign so neither branch overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_array(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a):
    out = sigmoid_array(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    return _result(softplus_array(a.data), (a,), lambda g: (g * sigmoid_array(a.data),), "softplus")


def _swish_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


def swish(a):
    """Elementwise ``x * sigmoid(x)``."""
    s = sigmoid_array(a.data)

    def backward(g):
        return (g * _swish_grad(a.data, s),)

    return _result(a.data * s, (a,), backward, "swish")


def clamp(a, lo, hi):
    """Clip to ``[lo, hi]``; gradient is zero outside the interval."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# -- reductions and shape manipulation -----------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward, "getitem")


def stack(tensors, axis=0):
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def concat(tensors, axis=-1):
    tensors = list(tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes.

    ``C[..., i, j] = sum_t A[..., i, t] * B[..., t, j]``.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# -- normalisers ---------------------------------------------------------------

def _check_finite_input(a, op):
    if not np.all(np.isfinite(a.data)):
        raise NumericError(f"{op} received non-finite input")


def softmax(a, axis=-1):
    """Max-shifted softmax along ``axis``."""
    _check_finite_input(a, "softmax")
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {a.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def masked_softmax(a, mask, axis=-1):
    """Softmax over the positions where ``mask`` is true; masked positions get weight 0.

    Equivalent to setting masked logits to minus infinity, without ever
    materialising infinities.
    """
    _check_finite_input(a, "masked_softmax")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not np.all(mask.any(axis=axis)):
        raise EmptySubsetError("empty modality set: every position is masked")
    fill = np.finfo(a.dtype).min
    peak = np.where(mask, a.data, fill).max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, a.data - peak, 0.0)), 0.0)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype, copy=False)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "masked_softmax")


def log_softmax(a, axis=-1):
    _check_finite_input(a, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def logsumexp(a, axis=-1, keepdims=False):
    peak = a.data.max(axis=axis, keepdims=True)
    total = np.log(np.exp(a.data - peak).sum(axis=axis, keepdims=True)) + peak
    out = total if keepdims else np.squeeze(total, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a.data - total),)

    return _result(out, (a,), backward, "logsumexp")


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last axis {n}")
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = g * gain.data
        dx = inv_std * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, unbroadcast(g * xhat, gain.shape), unbroadcast(g, bias.shape)

    return _result(out, (x, gain, bias), backward, "layer_norm")


def linear(x, weight, bias=None):
    """``x @ weight (+ bias)`` with ``weight`` of shape (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else out + bias
