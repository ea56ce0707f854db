"""Scene understanding module: supervised sigmoid self-attention.

The predicted map is ``sigmoid(Q K^T)`` over the ``N = H*W`` positions of the
encoder output; the ideal map marks pairs of positions that share a class.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, ops
from .autograd.tensor import ShapeError
from .blocks import Conv

MAX_POSITIONS = 4096
BCE_EPS = 1e-7


@dataclass
class SumParams:
    wq: Conv
    wk: Conv
    wv: Conv
    wout: Conv

    @classmethod
    def init(cls, channels, rng, qk_channels=None, v_channels=None, out_std=None):
        cq = qk_channels or channels // 2
        cv = v_channels or channels // 2
        qk_std = 1.0 / np.sqrt(channels) / np.sqrt(np.sqrt(cq))
        wq = Conv.init(channels, cq, 1, rng, std=qk_std)
        wk = Conv.init(channels, cq, 1, rng, std=qk_std)
        wv = Conv.init(channels, cv, 1, rng, std=1.0 / np.sqrt(channels))
        wout = Conv.init(cv, channels, 1, rng, std=out_std if out_std is not None else 0.1 / np.sqrt(cv))
        return cls(wq, wk, wv, wout)

    def __post_init__(self):
        if self.wq.out_channels != self.wk.out_channels:
            raise ShapeError("query and key channel counts must match")
        if self.wout.out_channels != self.wq.in_channels:
            raise ShapeError("output transform must restore the input channel count")


def _flatten(t):
    # (..., C, H, W) -> (..., N, C)
    lead = t.shape[:-3]
    c, h, w = t.shape[-3:]
    flat = t.reshape(*lead, c, h * w)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    return flat.transpose(axes)


def _unflatten(t, h, w):
    # (..., N, C) -> (..., C, H, W)
    lead = t.shape[:-2]
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    return t.transpose(axes).reshape(*lead, t.shape[-1], h, w)


def attention_logits(x, p):
    q = _flatten(p.wq(x))
    k = _flatten(p.wk(x))
    return ops.matmul(q, ops.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))


def sum_forward(x, p, attention=None):
    """Return ``(y, predicted)`` with ``y = Wout(A V) + x``.

    ``attention`` substitutes a fixed map (e.g. the ideal one) for the learned
    ``predicted`` in the aggregation; ``predicted`` is still returned.
    """
    h, w = x.shape[-2:]
    if h * w > MAX_POSITIONS:
        raise ValueError(f"attention over {h * w} positions exceeds the {MAX_POSITIONS} guard")
    predicted = ops.sigmoid(attention_logits(x, p))
    a = predicted if attention is None else attention
    if a.shape != predicted.shape:
        raise ShapeError(f"attention override shape {a.shape} != {predicted.shape}")
    v = _flatten(p.wv(x))
    agg = _unflatten(ops.matmul(a, v), h, w)
    return ops.add(p.wout(agg), x), predicted


def ideal_attention_map(labels, n_classes, size):
    """Binary ``N x N`` map with 1 where two positions share a label.

    ``labels`` is ``H x W`` (or ``B x H x W``) at full resolution; it is
    nearest-neighbour downsampled to ``size`` first.
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    h, w = size
    fh, fw = labels.shape[-2] // h, labels.shape[-1] // w
    if fh < 1 or fh * h != labels.shape[-2] or fw != fh or fw * w != labels.shape[-1]:
        raise ValueError(f"cannot downsample {labels.shape[-2:]} labels to {size}")
    small = ops.nearest_downsample(labels, fh).astype(np.int64)
    m = small.reshape(*small.shape[:-2], h * w)
    onehot = np.eye(n_classes)[m]
    return np.matmul(onehot, np.swapaxes(onehot, -1, -2))


def attention_loss(predicted, ideal):
    """Mean binary cross-entropy between predicted and ideal attention maps."""
    ideal = np.asarray(ideal.data if isinstance(ideal, Tensor) else ideal, dtype=np.float64)
    if predicted.shape != ideal.shape:
        raise ShapeError(f"attention shapes differ: {predicted.shape} vs {ideal.shape}")
    p = ops.clamp(predicted, BCE_EPS, 1.0 - BCE_EPS)
    ll = ops.mul(ops.log(p), ideal) + ops.mul(ops.log(ops.sub(1.0, p)), 1.0 - ideal)
    return ops.negate(ops.mean(ll))
