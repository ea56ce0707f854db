"""Dilated residual encoder and the two task decoders.

Parameters live in small dataclasses holding :class:`Tensor` leaves; forward
passes are plain functions over them.  Inputs are ``C x H x W`` feature maps
or ``B x C x H x W`` batches.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, conv2d, ops
from .autograd.tensor import ShapeError

DEPTH_FLOOR = 1e-3  # metres


def named_parameters(obj, prefix=""):
    """Yield ``(dotted_name, Tensor)`` for every trainable leaf under ``obj``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            value = getattr(obj, f.name)
            if value is None:
                continue
            yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def static(default=None):
    return field(default=default, metadata={"static": True})


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = static(1)
    dilation: int = static(1)
    groups: int = static(1)

    @classmethod
    def init(cls, cin, cout, k, rng, stride=1, dilation=1, groups=1, bias=True, std=None, zero=False):
        shape = (cout, cin // groups, k, k)
        if zero:
            w = np.zeros(shape)
        else:
            fan_in = (cin // groups) * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in) if std is None else std, size=shape)
        b = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        return cls(Tensor(w, requires_grad=True), b, stride, dilation, groups)

    @property
    def in_channels(self):
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, dilation=self.dilation, groups=self.groups)


# -- encoder ---------------------------------------------------------------------

@dataclass
class ResidualBlockParams:
    conv1: Conv
    conv2: Conv
    proj: Conv | None = None

    @classmethod
    def init(cls, cin, cout, rng, stride=1, dilation=1, branch_gain=0.5):
        conv1 = Conv.init(cin, cout, 3, rng, stride=stride, dilation=dilation)
        conv2 = Conv.init(cout, cout, 3, rng, dilation=dilation, std=branch_gain * np.sqrt(2.0 / (cout * 9)))
        proj = Conv.init(cin, cout, 1, rng, stride=stride) if (cin != cout or stride > 1) else None
        return cls(conv1, conv2, proj)

    @property
    def stride(self):
        return self.conv1.stride

    @property
    def dilation(self):
        return self.conv1.dilation


def residual_block(x, p):
    """``relu(conv2(relu(conv1(x))) + proj(x))``; identity shortcut without a projection."""
    cin = x.shape[-3]
    if cin != p.conv1.in_channels:
        raise ShapeError(f"residual block expects {p.conv1.in_channels} channels, got {cin}")
    h = ops.relu(p.conv1(x))
    h = p.conv2(h)
    shortcut = p.proj(x) if p.proj is not None else x
    return ops.relu(h + shortcut)


@dataclass(frozen=True)
class EncoderConfig:
    stem_channels: int = 16
    stages: tuple = ((16, 2, 1), (32, 2, 1), (48, 2, 1), (48, 1, 2), (64, 1, 4))

    def __post_init__(self):
        stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        stride = int(np.prod([s[1] for s in stages]))
        if stride != 8:
            raise ValueError(f"encoder stages must reduce resolution by 8, got {stride}")
        if len(stages) < 2 or stages[-2][1:] != (1, 2) or stages[-1][1:] != (1, 4):
            raise ValueError("last two encoder stages must be stride 1 with dilation 2 then 4")

    @property
    def out_channels(self):
        return self.stages[-1][0]

    def to_dict(self):
        return {"stem_channels": self.stem_channels, "stages": [list(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d):
        return cls(stem_channels=int(d["stem_channels"]), stages=tuple(tuple(s) for s in d["stages"]))


@dataclass
class EncoderParams:
    stem: Conv
    blocks: list
    config: EncoderConfig = static(None)

    @classmethod
    def init(cls, cfg, rng, in_channels=3):
        stem = Conv.init(in_channels, cfg.stem_channels, 3, rng)
        blocks = []
        cin = cfg.stem_channels
        for cout, stride, dilation in cfg.stages:
            blocks.append(ResidualBlockParams.init(cin, cout, rng, stride=stride, dilation=dilation))
            cin = cout
        return cls(stem, blocks, cfg)


def encoder_forward(image, p):
    """Image (3xHxW or Bx3xHxW) to a feature map at 1/8 resolution."""
    h, w = image.shape[-2:]
    if h % 8 or w % 8:
        raise ShapeError(f"encoder input size {h}x{w} is not divisible by 8")
    x = ops.relu(p.stem(image))
    for block in p.blocks:
        x = residual_block(x, block)
    return x


# -- decoders --------------------------------------------------------------------

@dataclass
class DecoderBranchParams:
    ups: list
    head: Conv
    kind: str = static("depth")

    @classmethod
    def init(cls, in_channels, channels, out_channels, rng, kind="depth", depth_init=3.0):
        ups = []
        cin = in_channels
        for cout in channels:
            ups.append(Conv.init(cin, cout, 3, rng))
            cin = cout
        head = Conv.init(cin, out_channels, 1, rng, std=np.sqrt(1.0 / cin))
        if kind == "depth":
            # softplus^-1 so an untrained branch predicts roughly depth_init metres
            head.bias.data[:] = np.log(np.expm1(depth_init))
        return cls(ups, head, kind)

    @property
    def channels(self):
        return [c.out_channels for c in self.ups]


def decoder_stage(x, p, t):
    """Upsampling block ``t``: bilinear x2, 3x3 conv, relu."""
    return ops.relu(p.ups[t](ops.upsample2x(x)))


def decoder_head(x, p):
    out = p.head(x)
    if p.kind == "depth":
        return ops.add(ops.softplus(out), DEPTH_FLOOR)
    return out


def decoder_branch_forward(feat, p):
    """Decode a 1/8-resolution feature map to a full-resolution prediction."""
    x = feat
    for t in range(len(p.ups)):
        x = decoder_stage(x, p, t)
    return decoder_head(x, p)
