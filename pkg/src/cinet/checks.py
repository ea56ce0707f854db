"""Finite-difference suites behind ``cinet grad-check``.

Each suite returns ``{item: worst relative error}``; an item passes when its
error is at most :data:`TOLERANCE`.
"""
from __future__ import annotations

import time

import numpy as np

from . import losses
from .autograd import Tensor, conv2d, grad_check, grad_check_params, ops
from .blocks import DecoderBranchParams, EncoderConfig, EncoderParams, ResidualBlockParams, decoder_branch_forward, encoder_forward, residual_block
from .context import SumParams, attention_loss, ideal_attention_map, sum_forward
from .model import CINetParams, ModelConfig, forward
from .sharing import FsmParams, LsuParams, fsm_forward, lsu_forward

TOLERANCE = 1e-4
SCOPES = ("ops", "losses", "blocks", "end2end")


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _weighted_sum(rng, shape):
    w = rng.normal(size=shape)
    return lambda t: ops.sum(ops.mul(t, w))


def ops_suite(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    kinked = _away_from_zero(rng, (3, 4))
    w34 = _weighted_sum(rng, (3, 4))
    mask = rng.random((3, 4)) < 0.5
    img = rng.normal(size=(2, 3, 6, 6))
    kern = rng.normal(size=(4, 3, 3, 3)) * 0.3
    kern_g = rng.normal(size=(6, 1, 3, 3)) * 0.3
    img_g = rng.normal(size=(1, 6, 6, 6))
    w_up = rng.normal(size=(2, 3, 12, 12))
    w_pool = rng.normal(size=(2, 3, 3, 3))
    w_conv = rng.normal(size=(2, 4, 6, 6))
    w_s2 = rng.normal(size=(2, 4, 3, 3))
    right = rng.normal(size=(2, 5))
    left = rng.normal(size=(2, 5, 3))
    w_mm = rng.normal(size=(2, 3, 5))
    w_mm2 = rng.normal(size=(2, 5, 4))

    items = {
        "add": (lambda t: w34(ops.add(t, Tensor(y))), x),
        "sub": (lambda t: w34(ops.sub(Tensor(y), t)), x),
        "mul": (lambda t: w34(ops.mul(t, Tensor(y))), x),
        "div": (lambda t: w34(ops.div(Tensor(y), t)), pos),
        "exp": (lambda t: w34(ops.exp(t)), x),
        "log": (lambda t: w34(ops.log(t)), pos),
        "sigmoid": (lambda t: w34(ops.sigmoid(t)), x),
        "relu": (lambda t: w34(ops.relu(t)), kinked),
        "abs": (lambda t: w34(ops.abs(t)), kinked),
        "square": (lambda t: w34(ops.square(t)), x),
        "sqrt": (lambda t: w34(ops.sqrt(t)), pos),
        "softplus": (lambda t: w34(ops.softplus(t)), x),
        "where": (lambda t: w34(ops.where(mask, ops.square(t), ops.exp(t))), x),
        "sum": (lambda t: ops.sum(ops.square(ops.sum(t, axis=0))), x),
        "mean": (lambda t: ops.square(ops.mean(ops.exp(t))), x),
        "max": (lambda t: ops.square(ops.max(t)), x),
        "log_softmax": (lambda t: w34(ops.log_softmax(t, axis=0)), x),
        "matmul": (lambda t: ops.sum(ops.mul(ops.matmul(t.reshape(2, 3, 2), Tensor(right)), Tensor(w_mm))), x),
        "matmul_shared_rhs": (lambda t: ops.sum(ops.mul(ops.matmul(Tensor(left), t.reshape(3, 4)), Tensor(w_mm2))), x),
        "transpose": (lambda t: ops.sum(ops.mul(ops.transpose(t), Tensor(y.T))), x),
        "getitem": (lambda t: ops.sum(ops.square(t[mask])), x),
        "concat": (lambda t: ops.sum(ops.mul(ops.concat([t, ops.square(t)], axis=0), Tensor(np.vstack([y, x])))), x),
        "upsample2x": (lambda t: ops.sum(ops.mul(ops.upsample2x(t), Tensor(w_up))), img),
        "avgpool2": (lambda t: ops.sum(ops.mul(ops.avgpool2(t), Tensor(w_pool))), img),
        "conv2d": (lambda t: ops.sum(ops.mul(conv2d(t, Tensor(kern)), Tensor(w_conv))), img),
        "conv2d_kernel": (lambda k: ops.sum(ops.mul(conv2d(Tensor(img), k), Tensor(w_conv))), kern),
        "conv2d_stride2": (lambda t: ops.sum(ops.mul(conv2d(t, Tensor(kern), stride=2), Tensor(w_s2))), img),
        "conv2d_dilated": (lambda t: ops.sum(ops.mul(conv2d(t, Tensor(kern), dilation=2), Tensor(w_conv))), img),
        "conv2d_grouped": (lambda t: ops.sum(ops.square(conv2d(t, Tensor(kern_g), groups=6))), img_g),
    }
    return {name: grad_check(f, arr) for name, (f, arr) in items.items()}


def losses_suite(seed=0):
    rng = np.random.default_rng(seed)
    weights = losses.LossWeights()
    gt = rng.uniform(1.0, 5.0, (6, 6))
    mask = rng.random((6, 6)) > 0.15
    labels = rng.integers(0, 3, (6, 6))
    fd = rng.normal(size=(3, 6, 6)) * 0.5
    fs = rng.normal(size=(3, 6, 6)) * 0.5
    cfg = losses.ConsistencyConfig.init(1.0)
    cw = losses.class_weights([labels], 3)

    # errors placed at c +/- 1e-3 so the BerHu branch stays fixed under the step
    e_max = 2.0
    c = 0.2 * e_max
    errs = np.where(rng.random((6, 6)) < 0.5, c - 1e-3, c + 1e-3) * rng.choice([-1.0, 1.0], (6, 6))
    errs[0, 0] = e_max
    berhu_pred = gt + errs

    ideal = ideal_attention_map(labels, 3, (6, 6))
    logits = rng.normal(size=(36, 36))

    items = {
        "berhu": (lambda t: losses.berhu_loss(t, gt, np.ones_like(mask)), berhu_pred),
        "pair": (lambda t: losses.pair_loss(t, gt, mask, pair_count=36, seed=seed), gt + rng.normal(size=(6, 6))),
        "normal": (lambda t: losses.normal_loss(t, gt, mask), gt + 0.3 * rng.normal(size=(6, 6))),
        "seg_ce": (lambda t: losses.seg_loss(t, labels, mask, cw), rng.normal(size=(3, 6, 6))),
        "consistency_fd": (lambda t: losses.consistency_loss(t, Tensor(fs), labels, cfg), fd),
        "consistency_fs": (lambda t: losses.consistency_loss(Tensor(fd), t, labels, cfg), fs),
        "attention_bce": (lambda t: attention_loss(ops.sigmoid(t), ideal), logits),
    }
    out = {name: grad_check(f, arr) for name, (f, arr) in items.items()}

    def sigma_loss():
        return losses.consistency_loss(Tensor(fd), Tensor(fs), labels, cfg)

    out.update({f"consistency_{k}": v for k, v in grad_check_params(
        sigma_loss, {"sigma_fd": cfg.sigma_fd, "sigma_fs": cfg.sigma_fs}).items()})

    seg_logits = rng.normal(size=(3, 6, 6))

    def total(t):
        comps = {
            "depth": losses.depth_loss(t, gt, mask, weights, seed=seed),
            "seg": losses.seg_loss(Tensor(seg_logits), labels, mask, cw),
            "con": losses.consistency_loss(Tensor(fd), Tensor(fs), labels, cfg),
        }
        return losses.total_loss(comps, weights)

    out["total"] = grad_check(total, gt + rng.normal(size=(6, 6)))
    return out


def blocks_suite(seed=0):
    rng = np.random.default_rng(seed)
    results = {}

    def check(prefix, loss_fn, params):
        for name, err in grad_check_params(loss_fn, params).items():
            results[f"{prefix}.{name}"] = err

    x = Tensor(rng.normal(size=(1, 4, 6, 6)))
    rb = ResidualBlockParams.init(4, 6, rng, stride=1, dilation=2)
    _jitter_biases(_named(rb), rng)
    w_rb = rng.normal(size=(1, 6, 6, 6))
    check("residual", lambda: ops.sum(ops.mul(residual_block(x, rb), w_rb)), dict(_named(rb)))
    results["residual.input"] = grad_check(lambda t: ops.sum(ops.mul(residual_block(t, rb), w_rb)), x.data)

    cfg = EncoderConfig(stem_channels=4, stages=((4, 2, 1), (6, 2, 1), (6, 2, 1), (8, 1, 2), (8, 1, 4)))
    enc = EncoderParams.init(cfg, rng)
    _jitter_biases(_named(enc), rng)
    img = Tensor(rng.uniform(size=(1, 3, 16, 16)))
    w_enc = rng.normal(size=(1, 8, 2, 2))
    check("encoder", lambda: ops.sum(ops.mul(encoder_forward(img, enc), w_enc)), dict(_named(enc)))

    feat = Tensor(rng.normal(size=(1, 8, 2, 2)))
    dec = DecoderBranchParams.init(8, (6, 4, 4), 1, rng, kind="depth")
    _jitter_biases(_named(dec), rng)
    w_dec = rng.normal(size=(1, 1, 16, 16))
    check("decoder", lambda: ops.sum(ops.mul(decoder_branch_forward(feat, dec), w_dec)), dict(_named(dec)))

    sp = SumParams.init(8, rng)
    sp.wout.weight.data = rng.normal(size=sp.wout.weight.shape) * 0.2
    sx = rng.normal(size=(1, 8, 3, 3))
    w_sum = rng.normal(size=(1, 8, 3, 3))
    w_att = rng.normal(size=(1, 9, 9))

    def sum_loss(t=None):
        y, a = sum_forward(Tensor(sx) if t is None else t, sp)
        return ops.add(ops.sum(ops.mul(y, w_sum)), ops.sum(ops.mul(a, w_att)))

    check("sum", sum_loss, dict(_named(sp)))
    results["sum.input"] = grad_check(sum_loss, sx)

    fd = Tensor(rng.normal(size=(1, 4, 4, 4)))
    fs = Tensor(rng.normal(size=(1, 4, 4, 4)))
    w_d = rng.normal(size=(1, 4, 4, 4))
    w_s = rng.normal(size=(1, 4, 4, 4))
    for kind, params, fwd in (("fsm", FsmParams.init(4, 4, rng), fsm_forward), ("lsu", LsuParams.init(4, 4, rng), lsu_forward)):
        for p in _named(params):
            if np.all(p[1].data == 0):
                p[1].data = rng.normal(size=p[1].shape) * 0.3

        def share_loss(params=params, fwd=fwd):
            a, b = fwd(fd, fs, params)
            return ops.add(ops.sum(ops.mul(a, w_d)), ops.sum(ops.mul(b, w_s)))

        check(kind, share_loss, dict(_named(params)))
    return results


def _named(obj):
    from .blocks import named_parameters

    return list(named_parameters(obj))


def _jitter_biases(params, rng, scale=0.05):
    """Zero biases put relu inputs exactly on the kink wherever the input is zero."""
    for name, p in params:
        if name.endswith("bias") and np.all(p.data == 0):
            p.data = rng.normal(size=p.shape) * scale


def end2end_suite(seed=0, max_coords=4, h=1e-6):
    """Composite total loss of the default network on a 2-sample 64x64 batch.

    The step must stay below the spacing of relu and absolute-value kinks
    along a coordinate; at ``h=1e-5`` a few stem-bias differences straddle one.
    """
    from .data import GeneratorConfig, generate_dataset, stack

    config = ModelConfig()
    params = CINetParams.init(config, seed=seed)
    # perturb the zero-initialised sharing heads so their gradients are exercised
    rng = np.random.default_rng([seed, 1])
    for name, p in params.named_parameters().items():
        if name.startswith("sharing.") and np.all(p.data == 0):
            p.data = rng.normal(size=p.shape) * 0.05
    _jitter_biases(params.named_parameters().items(), rng)
    samples = generate_dataset(GeneratorConfig(seed=seed), 2)
    rgb, depth, labels, mask = stack(samples)
    weights = losses.LossWeights()
    class_w = losses.class_weights(labels, config.n_classes)
    ideal = ideal_attention_map(labels, config.n_classes, config.attention_size)

    def loss_fn():
        out = forward(params, rgb)
        comps = {
            "att": attention_loss(out.attention, ideal),
            "depth": losses.depth_loss(out.depth, depth, mask, weights, seed=seed),
            "con": losses.consistency_loss(out.fd, out.fs, labels, params.consistency),
            "seg": losses.seg_loss(out.logits, labels, np.ones(labels.shape, dtype=bool), class_w),
        }
        return losses.total_loss(comps, weights)

    named = params.named_parameters()
    return grad_check_params(loss_fn, named, h=h, max_coords=max_coords, rng=np.random.default_rng(seed))


SUITES = {"ops": ops_suite, "losses": losses_suite, "blocks": blocks_suite, "end2end": end2end_suite}


def run_scope(scope, seed=0):
    """``(results, seconds)`` for one scope."""
    if scope not in SUITES:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
    start = time.perf_counter()
    results = SUITES[scope](seed=seed)
    return results, time.perf_counter() - start
