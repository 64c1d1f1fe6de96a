"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one record ``(inputs, output, rule)``
to the calling thread's tape, so the tape is topologically ordered by
construction.  :func:`backward` replays it in reverse and accumulates into
``.grad`` of the leaves (``+=``; callers zero gradients between steps).

Storage is row-major ``numpy`` arrays.  The default dtype is float32; the
:func:`precision` context switches newly created tensors to float64, which
the gradient-check tests use to keep finite-difference oracles tight.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_local = threading.local()


class Tape:
    """Ordered list of recorded operations for one thread."""

    def __init__(self):
        self.records = []

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


class _State:
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)


def _state():
    st = getattr(_local, "state", None)
    if st is None:
        st = _local.state = _State()
    return st


def current_tape():
    return _state().tape


def reset_tape():
    _state().tape.clear()


def get_default_dtype():
    return _state().dtype


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors (and constants) in ``dtype`` inside the block."""
    st = _state()
    old = st.dtype
    st.dtype = np.dtype(dtype)
    if st.dtype not in (np.float32, np.float64):
        st.dtype = old
        raise ContractError(f"unsupported dtype {dtype}")
    try:
        yield
    finally:
        st.dtype = old


def float64():
    return precision(np.float64)


@contextlib.contextmanager
def no_grad():
    st = _state()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def is_grad_enabled():
    return _state().grad_enabled


def check_finite(arr, what="tensor"):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=_state().dtype)
        check_finite(arr, name or "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True
        self.name = name

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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _new(data, inputs, rule, op):
    """Wrap an op result, recording it on the tape when any input needs grad."""
    check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_leaf = False
    out.name = None
    st = _state()
    out.requires_grad = st.grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        st.tape.records.append((inputs, out, rule))
    return out


def make_op(data, inputs, rule, op="custom op"):
    """Public hook for fused operations defined outside this module.

    ``rule(grad_out)`` must return one gradient (or ``None``) per input.
    """
    return _new(np.asarray(data, dtype=_result_dtype(inputs)), tuple(inputs), rule, op)


def _result_dtype(inputs):
    return np.result_type(*[t.data.dtype for t in inputs]) if inputs else _state().dtype


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _new(data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _new(data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data

    def rule(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _new(data, (a, b), rule, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"div: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data

    def rule(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _new(data, (a, b), rule, "div")


def neg(a):
    a = as_tensor(a)
    return _new(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _new(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data
    return _new(out, (a,), lambda g: (g / ad,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _new(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _new(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _new(out, (a,), rule, "gelu")


def quick_gelu(a):
    """x * sigmoid(1.702 x), the activation used by CLIP vision towers."""
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(1.702 * x)
    out = x * s
    return _new(out, (a,), lambda g: (g * (s + 1.702 * x * s * (1.0 - s)),), "quick_gelu")


ACTIVATIONS = {"gelu": gelu, "quick_gelu": quick_gelu}


# -- linear algebra and shape ops -----------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _new(data, (a, b), rule, "matmul")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {a.shape} -> {shape}") from exc
    src = a.shape
    return _new(data, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _new(data, (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_fancy(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a, idx):
    a = as_tensor(a)
    try:
        data = np.array(a.data[idx])
    except IndexError as exc:
        raise DimensionError(f"index {idx!r} out of range for shape {a.shape}") from exc
    shape, dtype = a.shape, a.data.dtype
    fancy = _is_fancy(idx)

    def rule(g):
        z = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(z, idx, g)
        else:
            z[idx] = g
        return (z,)

    return _new(data, (a,), rule, "getitem")


def concat(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _new(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {a.shape} -> {shape}") from exc
    src = a.shape
    return _new(data, (a,), lambda g: (unbroadcast(g, src).reshape(src),), "broadcast_to")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _new(data, (a,), rule, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- normalisation --------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _new(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _new(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: feature dim {d} vs gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def rule(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _new(out, (x, gamma, beta), rule, "layer_norm")


def straight_through(hard, soft):
    """Forward value is exactly ``hard``; the gradient flows into ``soft``."""
    hard, soft = as_tensor(hard), as_tensor(soft)
    if hard.shape != soft.shape:
        raise DimensionError(f"straight_through: {hard.shape} vs {soft.shape}")
    return _new(hard.data.astype(soft.data.dtype, copy=True), (soft,), lambda g: (g,), "straight_through")


# -- reverse pass -----------------------------------------------------------

def backward(loss, params=None):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    The tape is consumed.  Leaves that were used but received no gradient,
    and any tensors listed in ``params``, end up with a zero gradient rather
    than ``None``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state().tape
    seen_leaves = {}
    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
    else:
        grads = {id(loss): np.ones_like(loss.data)}
        for inputs, out, rule in reversed(tape.records):
            g = grads.pop(id(out), None)
            if g is None:
                for t in inputs:
                    if t.is_leaf and t.requires_grad:
                        seen_leaves[id(t)] = t
                continue
            for t, gi in zip(inputs, rule(g)):
                if not t.requires_grad:
                    continue
                if t.is_leaf:
                    seen_leaves[id(t)] = t
                    if gi is not None:
                        _accumulate(t, gi)
                elif gi is not None:
                    k = id(t)
                    grads[k] = grads[k] + gi if k in grads else gi
    tape.clear()
    for t in list(seen_leaves.values()) + list(params or ()):
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def _accumulate(t, g):
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.shape:
        g = unbroadcast(g, t.shape).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g
