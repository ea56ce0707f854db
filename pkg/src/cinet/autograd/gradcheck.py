"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))


def _scalar(value):
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if data.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {data.shape}")
    return float(data.reshape(-1)[0])


def _coords(shape, max_coords, rng):
    size = int(np.prod(shape))
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def grad_check(f, x, h=1e-5, max_coords=None, rng=None):
    """Worst relative error between the analytic and central-difference gradient.

    ``f`` maps a Tensor to a scalar Tensor.  Relative error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("finite-difference step h must lie in [1e-7, 1e-3]")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    _scalar(out)
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    rng = rng if rng is not None else np.random.default_rng(0)
    idx = _coords(base.shape, max_coords, rng)
    flat = base.reshape(-1)
    numeric = np.empty(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base)))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base)))
        flat[i] = orig
        numeric[n] = (fp - fm) / (2 * h)
    return relative_error(analytic.reshape(-1)[idx], numeric)


def grad_check_params(loss_fn, params, h=1e-5, max_coords=None, rng=None):
    """Check every named parameter tensor of a model in place.

    ``loss_fn()`` must rebuild the graph from the current ``params`` values.
    Returns ``{name: worst relative error}``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    _scalar(loss)
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for name, p in params.items()}

    errors = {}
    for name, p in params.items():
        idx = _coords(p.shape, max_coords, rng)
        flat = p.data.reshape(-1)
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(loss_fn())
            flat[i] = orig - h
            fm = _scalar(loss_fn())
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * h)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    for p in params.values():
        p.grad = None
    return errors
