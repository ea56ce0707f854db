"""Training objectives for joint depth and segmentation.

Depth maps are ``H x W`` or ``B x H x W`` tensors in metres; ``mask`` marks
pixels with valid ground truth.  Every loss mean-reduces over what it counts
so magnitudes do not depend on resolution.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .autograd import Tensor, ops
from .autograd.tensor import EPS, ShapeError

log = logging.getLogger(__name__)

OFFSETS = ((1, 0), (-1, 0), (2, 0), (-2, 0), (0, 1), (0, -1), (0, 2), (0, -2))
SIGMA_FLOOR = 1e-3
SIGMA_INIT = 0.1


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # depth
    beta: float = 5.0  # consistency
    gamma: float = 0.3  # segmentation
    lam: float = 1.0  # pair term inside the depth loss
    mu: float = 5.0  # normal term inside the depth loss
    berhu_fraction: float = 0.2
    pair_count: int = 500

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if not 0 < self.berhu_fraction <= 1:
            raise ValueError("berhu_fraction must lie in (0, 1]")
        if self.pair_count < 2:
            raise ValueError("pair_count must be at least 2")

    def to_dict(self):
        return asdict(self)


def _mask(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} != {tuple(shape)}")
    if not mask.any():
        raise EmptyMaskError("mask has no valid pixels")
    return mask


def _gt(gt):
    return np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)


# -- depth -------------------------------------------------------------------

def berhu_loss(pred, gt, mask, fraction=0.2, c=None):
    """Reverse Huber: ``|e|`` up to ``c``, ``(e^2 + c^2) / 2c`` beyond.

    ``c`` defaults to ``fraction`` times the largest absolute error over all
    valid pixels of the batch (and is differentiated through that maximum).
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    mask = _mask(mask, pred.shape)
    err = ops.sub(pred, _gt(gt))[mask]
    abs_err = ops.abs(err)
    thr = ops.scale(ops.max(abs_err), fraction) if c is None else Tensor(float(c))
    if thr.item() < EPS:
        return ops.mean(abs_err)
    quad = ops.div(ops.add(ops.square(err), ops.square(thr)), ops.scale(thr, 2.0))
    return ops.mean(ops.where(abs_err.data <= thr.data, abs_err, quad))


def sample_pairs(mask, pair_count, seed):
    """Flat indices of the pixel subset used by the pair loss (sorted, deterministic)."""
    valid = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(valid) < 2:
        raise EmptyMaskError("pair loss needs at least two valid pixels")
    if len(valid) <= pair_count:
        return valid
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(valid, size=pair_count, replace=False))


def _pair_single(pred, gt, mask, pair_count, seed):
    idx = sample_pairs(mask, pair_count, seed)
    n = len(idx)
    err = ops.sub(pred, gt).reshape(-1)[idx].reshape(n, 1)
    spread = ops.matmul(err, Tensor(np.ones((1, n))))
    diff = ops.abs(ops.sub(spread, spread.T))
    upper = np.triu(np.ones((n, n)), 1)
    return ops.scale(ops.sum(ops.mul(diff, upper)), 2.0 / (n * (n - 1)))


def pair_loss(pred, gt, mask, pair_count=500, seed=0):
    """Mean over unordered pairs of ``|(d_p - d_q) - (pred_p - pred_q)|``.

    Pairs come from ``pair_count`` valid pixels sampled without replacement
    (all of them when fewer are valid).  Batches average per-sample losses,
    each sample drawing from ``(seed, index)``.
    """
    gt = _gt(gt)
    mask = _mask(mask, pred.shape)
    if pred.ndim == 2:
        return _pair_single(pred, gt, mask, pair_count, seed)
    terms = [
        _pair_single(pred[b], gt[b], mask[b], pair_count, [seed, b])
        for b in range(pred.shape[0])
    ]
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.scale(total, 1.0 / len(terms))


def _forward_diff(d, axis):
    # axis is -1 (x) or -2 (y)
    n = d.shape[axis]
    tail = (slice(None),) * (-axis - 1)
    diff = ops.sub(d[(Ellipsis, slice(1, None)) + tail], d[(Ellipsis, slice(0, n - 1)) + tail])
    last = diff[(Ellipsis, slice(n - 2, n - 1)) + tail]
    return ops.concat([diff, last], axis=axis)


def surface_normal(d):
    """Unnormalised normals ``(-dd/dx, -dd/dy, 1)`` stacked on a new axis -3.

    Forward differences; the last column/row repeats its neighbour so the
    output keeps the input's spatial shape.
    """
    d = d if isinstance(d, Tensor) else Tensor(d)
    if d.shape[-1] < 2 or d.shape[-2] < 2:
        raise ShapeError("surface normals need at least a 2x2 map")
    gx = _forward_diff(d, -1)
    gy = _forward_diff(d, -2)
    lead = d.shape[:-2]
    one = Tensor(np.ones(d.shape))
    parts = [ops.negate(gx), ops.negate(gy), one]
    return ops.concat([p.reshape(*lead, 1, *d.shape[-2:]) for p in parts], axis=-3)


def normal_loss(pred, gt, mask):
    """Mean over valid pixels of one minus the cosine between predicted and true normals."""
    mask = _mask(mask, pred.shape)
    n_pred = surface_normal(pred)
    n_gt = surface_normal(Tensor(_gt(gt))).data
    dot = ops.sum(ops.mul(n_pred, n_gt), axis=-3)
    norm_pred = ops.clamp(ops.sqrt(ops.sum(ops.square(n_pred), axis=-3)), lo=1e-12)
    norm_gt = np.maximum(np.sqrt((n_gt ** 2).sum(axis=-3)), 1e-12)
    cos = ops.clamp(ops.div(dot, ops.mul(norm_pred, norm_gt)), hi=1.0)  # rounding can exceed 1
    return ops.mean(ops.sub(1.0, cos[mask]))


def combine_depth(berhu, pair, normal, weights):
    return ops.add(ops.add(berhu, ops.scale(pair, weights.lam)), ops.scale(normal, weights.mu))


def depth_loss_terms(pred, gt, mask, weights, seed=0):
    return {
        "berhu": berhu_loss(pred, gt, mask, weights.berhu_fraction),
        "pair": pair_loss(pred, gt, mask, weights.pair_count, seed),
        "norm": normal_loss(pred, gt, mask),
    }


def depth_loss(pred, gt, mask, weights, seed=0):
    """``berhu + lam * pair + mu * normal``."""
    terms = depth_loss_terms(pred, gt, mask, weights, seed)
    return combine_depth(terms["berhu"], terms["pair"], terms["norm"], weights)


# -- segmentation ------------------------------------------------------------------

def class_weights(label_maps, n_classes):
    """``(N_total - N_c) / N_total`` per class over a whole training set.

    Classes that never occur get weight 1.
    """
    counts = np.zeros(n_classes, dtype=np.int64)
    for labels in label_maps:
        counts += np.bincount(np.asarray(labels, dtype=np.int64).reshape(-1), minlength=n_classes)[:n_classes]
    total = counts.sum()
    if total == 0:
        raise ValueError("no labelled pixels")
    weights = (total - counts) / total
    absent = counts == 0
    if absent.any():
        log.warning("classes %s absent from training labels; weight set to 1", np.flatnonzero(absent).tolist())
        weights[absent] = 1.0
    return weights


def seg_loss(logits, labels, mask, weights=None):
    """Class-weighted cross-entropy averaged over masked pixels.

    ``logits`` is ``C x H x W`` (or batched); ``weights`` defaults to ones.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-3]
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    mask = _mask(mask, labels.shape)
    w = np.ones(n_classes) if weights is None else np.asarray(weights, dtype=np.float64)
    onehot = np.moveaxis(np.eye(n_classes)[labels], -1, -3)
    picked = ops.sum(ops.mul(ops.log_softmax(logits, axis=-3), onehot), axis=-3)
    pix_w = w[labels] * mask
    return ops.scale(ops.sum(ops.mul(picked, pix_w)), -1.0 / mask.sum())


# -- cross-task consistency ----------------------------------------------------------

def sigma_from_raw(raw):
    """Map an unconstrained scalar to a positive bandwidth."""
    return ops.add(ops.softplus(raw), SIGMA_FLOOR)


def raw_from_sigma(sigma):
    return float(np.log(np.expm1(sigma - SIGMA_FLOOR)))


@dataclass
class ConsistencyConfig:
    """Neighbour offsets and the two learnable bandwidths (stored unconstrained)."""

    sigma_fd: Tensor
    sigma_fs: Tensor
    offsets: tuple = OFFSETS

    @classmethod
    def init(cls, sigma=SIGMA_INIT):
        raw = raw_from_sigma(sigma)
        return cls(Tensor(raw, requires_grad=True), Tensor(raw, requires_grad=True))

    def __post_init__(self):
        if len(self.offsets) != 8:
            raise ValueError("consistency uses exactly 8 neighbour offsets")


def _shift_slices(h, w, dy, dx):
    rows = slice(max(0, -dy), h - max(0, dy))
    cols = slice(max(0, -dx), w - max(0, dx))
    rows_n = slice(max(0, -dy) + dy, h - max(0, dy) + dy)
    cols_n = slice(max(0, -dx) + dx, w - max(0, dx) + dx)
    return (rows, cols), (rows_n, cols_n)


def _affinity(f, here, there, inv_two_sigma_sq):
    a = f[(Ellipsis, slice(None)) + here]
    b = f[(Ellipsis, slice(None)) + there]
    dist = ops.sum(ops.square(ops.sub(a, b)), axis=-3)
    return ops.exp(ops.mul(dist, inv_two_sigma_sq))


def consistency_loss(fd, fs, labels, cfg):
    """Mismatch between depth- and segmentation-feature neighbour affinities.

    For each pixel and offset whose two labels differ, compares
    ``exp(-|f_p - f_q|^2 / 2 sigma^2)`` between the branches; returns the
    mean absolute difference over those counted pairs (0 if there are none).
    """
    if fd.shape[-2:] != fs.shape[-2:] or fd.shape[:-3] != fs.shape[:-3]:
        raise ShapeError(f"feature maps disagree: {fd.shape} vs {fs.shape}")
    labels = np.asarray(labels)
    h, w = fd.shape[-2:]
    if labels.shape[-2:] != (h, w):
        factor = labels.shape[-1] // w
        labels = labels[..., factor // 2::factor, factor // 2::factor]
    if labels.shape != fd.shape[:-3] + (h, w):
        raise ShapeError(f"labels {labels.shape} do not match features {fd.shape}")
    k_d = ops.div(-0.5, ops.square(sigma_from_raw(cfg.sigma_fd)))
    k_s = ops.div(-0.5, ops.square(sigma_from_raw(cfg.sigma_fs)))

    total = None
    count = 0
    for dy, dx in cfg.offsets:
        here, there = _shift_slices(h, w, dy, dx)
        if here[0].start >= here[0].stop or here[1].start >= here[1].stop:
            continue
        gate = labels[(Ellipsis,) + here] != labels[(Ellipsis,) + there]
        n = int(gate.sum())
        if n == 0:
            continue
        d_fd = _affinity(fd, here, there, k_d)
        d_fs = _affinity(fs, here, there, k_s)
        term = ops.sum(ops.mul(ops.abs(ops.sub(d_fd, d_fs)), gate))
        total = term if total is None else ops.add(total, term)
        count += n
    if count == 0:
        log.info("consistency loss: no cross-class neighbour pairs; returning 0")
        return Tensor(0.0)
    return ops.scale(total, 1.0 / count)


# -- total ----------------------------------------------------------------------

TERMS = ("att", "depth", "con", "seg")


def total_loss(components, weights, flags=None):
    """``att + alpha*depth + beta*con + gamma*seg`` over the enabled terms.

    ``components`` maps term names to scalar tensors; missing or disabled
    terms contribute exactly zero.
    """
    coef = {"att": 1.0, "depth": weights.alpha, "con": weights.beta, "seg": weights.gamma}
    total = Tensor(0.0)
    for name in TERMS:
        if flags is not None and not flags.get(name, False):
            continue
        value = components.get(name)
        if value is None:
            continue
        total = ops.add(total, ops.scale(value, coef[name]))
    return total
