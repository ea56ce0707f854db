"""Differentiable operations on :class:`Tensor`.

Binary ops accept equal shapes or a size-1 operand (scalar broadcast); any
other broadcast is rejected.  Backward rules that tests may want to swap out
are module-level functions looked up at call time.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import EPS, DomainError, ShapeError, Tensor, as_tensor

SIGMOID_CLIP = 36.0  # float64 sigmoid rounds to exactly 0/1 beyond this


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_shapes(a, b, op):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(np.abs(b.data) < EPS):
        raise DomainError("div: denominator within 1e-12 of zero")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "div")


def negate(a):
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "negate")


def scale(a, k):
    a = as_tensor(a)
    k = float(k)
    return Tensor._from_op(a.data * k, (a,), lambda g: (g * k,), "scale")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log: negative operand")
    x = np.maximum(a.data, EPS)

    def backward(g):
        return (np.where(a.data >= EPS, g / x, 0.0),)

    return Tensor._from_op(np.log(x), (a,), backward, "log")


def _sigmoid_grad(out, g):
    return g * out * (1.0 - out)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-np.clip(a.data, -SIGMOID_CLIP, SIGMOID_CLIP)))

    def backward(g):
        return (_sigmoid_grad(out, g),)

    return Tensor._from_op(out, (a,), backward, "sigmoid")


def relu(a):
    a = as_tensor(a)
    active = a.data > 0
    return Tensor._from_op(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,), "relu")


def abs(a):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a):
    a = as_tensor(a)
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative operand")
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / np.maximum(out, EPS),)

    return Tensor._from_op(out, (a,), backward, "sqrt")


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    slope = 1.0 / (1.0 + np.exp(-np.clip(a.data, -SIGMOID_CLIP, SIGMOID_CLIP)))
    return Tensor._from_op(out, (a,), lambda g: (g * slope,), "softplus")


def clamp(a, lo=None, hi=None):
    """Clip values; the gradient passes only where the input was inside [lo, hi]."""
    a = as_tensor(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    inside = (a.data >= lo_v) & (a.data <= hi_v)
    return Tensor._from_op(np.clip(a.data, lo_v, hi_v), (a,), lambda g: (g * inside,), "clamp")


def where(cond, a, b):
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    _binary_shapes(a, b, "where")
    out = np.where(cond, a.data, b.data)
    if out.shape != cond.shape and cond.size != 1:
        raise ShapeError("where: condition shape mismatch")

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return Tensor._from_op(out, (a, b), backward, "where")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "relu": relu,
    "abs": abs,
    "negate": negate,
}


def elementwise(kind, a, b=None):
    """Dispatch by name; ``scalar-scale`` takes a float as ``b``."""
    if kind == "scalar-scale":
        return scale(a, b)
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a) if b is None else fn(a, b)


# -- reductions ------------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max(a):  # noqa: A001
    """Global maximum; the gradient flows to the first maximal entry."""
    a = as_tensor(a)
    flat = int(np.argmax(a.data))

    def backward(g):
        out = np.zeros(a.size)
        out[flat] = float(g)
        return (out.reshape(a.shape),)

    return Tensor._from_op(a.data.reshape(-1)[flat], (a,), backward, "max")


def log_softmax(a, axis):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward, "log_softmax")


# -- linear algebra ------------------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading batch dimensions must agree, or ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape} disagree")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions {a.shape[:-2]} vs {b.shape[:-2]}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# -- structural -------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def _has_int_array(index):
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) and np.asarray(p).dtype.kind in "iu" for p in parts)


def getitem(a, index):
    a = as_tensor(a)
    scatter_add = _has_int_array(index)

    def backward(g):
        out = np.zeros(a.shape)
        if scatter_add:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return Tensor._from_op(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def concat_channels(tensors):
    """Concatenate feature maps along the channel axis (third from last)."""
    return concat(tensors, axis=-3)


@lru_cache(maxsize=None)
def _upsample_matrix(n):
    # half-pixel centers, edge clamped (matches align_corners=False)
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        w = src - lo
        m[o, int(np.clip(lo, 0, n - 1))] += 1.0 - w
        m[o, int(np.clip(lo + 1, 0, n - 1))] += w
    m.setflags(write=False)
    return m


def upsample2x(a):
    """Bilinear x2 upsampling over the last two axes."""
    a = as_tensor(a)
    h, w = a.shape[-2:]
    uh, uw = _upsample_matrix(h), _upsample_matrix(w)
    out = np.matmul(np.matmul(uh, a.data), uw.T)

    def backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return Tensor._from_op(out, (a,), backward, "upsample2x")


def avgpool2(a):
    """2x2 average pooling with stride 2 over the last two axes."""
    a = as_tensor(a)
    h, w = a.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial size, got {h}x{w}")
    lead = a.shape[:-2]
    out = a.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return Tensor._from_op(out, (a,), backward, "avgpool2")


def nearest_offset(factor):
    return factor // 2


def nearest_downsample(a, factor):
    """Keep the pixel nearest to each output cell's centre; works on arrays and tensors."""
    if factor < 1 or int(factor) != factor:
        raise ValueError("downsample factor must be a positive integer")
    off = nearest_offset(factor)
    idx = (Ellipsis, slice(off, None, factor), slice(off, None, factor))
    if isinstance(a, Tensor):
        return getitem(a, idx)
    return np.asarray(a)[idx]


STRUCTURAL = {
    "concat-channels": concat_channels,
    "bilinear-upsample2x": upsample2x,
    "avgpool2": avgpool2,
    "nearest-downsample": nearest_downsample,
    "reshape": reshape,
    "transpose": transpose,
}


def structural(kind, *args, **kwargs):
    try:
        fn = STRUCTURAL[kind]
    except KeyError:
        raise ValueError(f"unknown structural kind {kind!r}") from None
    return fn(*args, **kwargs)
