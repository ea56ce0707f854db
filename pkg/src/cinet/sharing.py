"""Cross-branch feature sharing: the FSM trunk block and the lateral LSU baseline."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autograd import ops
from .autograd.tensor import ShapeError
from .blocks import Conv


@dataclass
class DwSepConv:
    depthwise: Conv
    pointwise: Conv

    @classmethod
    def init(cls, cin, cout, rng):
        dw = Conv.init(cin, cin, 3, rng, groups=cin, bias=False, std=np.sqrt(2.0 / 9.0) / 2.0)
        pw = Conv.init(cin, cout, 1, rng)
        return cls(dw, pw)

    def __call__(self, x):
        return ops.relu(self.pointwise(self.depthwise(x)))


@dataclass
class FsmParams:
    trunk: list  # three DwSepConv: before pool, between pool and upsample, after upsample
    head_d: Conv
    head_s: Conv

    @classmethod
    def init(cls, depth_channels, seg_channels, rng, width=None):
        width = width or (depth_channels + seg_channels) // 2
        trunk = [
            DwSepConv.init(depth_channels + seg_channels, width, rng),
            DwSepConv.init(width, width, rng),
            DwSepConv.init(width, width, rng),
        ]
        head_d = Conv.init(width, depth_channels, 1, rng, zero=True)
        head_s = Conv.init(width, seg_channels, 1, rng, zero=True)
        return cls(trunk, head_d, head_s)


@dataclass
class LsuParams:
    fd1: Conv  # depth -> depth
    fd2: Conv  # depth -> seg
    fs1: Conv  # seg -> seg
    fs2: Conv  # seg -> depth

    @classmethod
    def init(cls, depth_channels, seg_channels, rng):
        cd, cs = depth_channels, seg_channels
        return cls(
            Conv.init(cd, cd, 1, rng, zero=True),
            Conv.init(cd, cs, 1, rng, zero=True),
            Conv.init(cs, cs, 1, rng, zero=True),
            Conv.init(cs, cd, 1, rng, zero=True),
        )


def _check_pair(fd, fs):
    if fd.shape[-2:] != fs.shape[-2:] or fd.shape[:-3] != fs.shape[:-3]:
        raise ShapeError(f"branch features disagree spatially: {fd.shape} vs {fs.shape}")


def fsm_shared(fd, fs, p):
    _check_pair(fd, fs)
    h, w = fd.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"FSM needs even spatial size, got {h}x{w}")
    x = p.trunk[0](ops.concat_channels([fd, fs]))
    x = p.trunk[1](ops.avgpool2(x))
    return p.trunk[2](ops.upsample2x(x))


def fsm_allocations(fd, fs, p):
    shared = fsm_shared(fd, fs, p)
    return p.head_d(shared), p.head_s(shared)


def fsm_forward(fd, fs, p):
    alloc_d, alloc_s = fsm_allocations(fd, fs, p)
    return ops.add(fd, alloc_d), ops.add(fs, alloc_s)


def lsu_allocations(fd, fs, p):
    _check_pair(fd, fs)
    return ops.add(p.fd1(fd), p.fs2(fs)), ops.add(p.fd2(fd), p.fs1(fs))


def lsu_forward(fd, fs, p):
    alloc_d, alloc_s = lsu_allocations(fd, fs, p)
    return ops.add(fd, alloc_d), ops.add(fs, alloc_s)


def share(fd, fs, p):
    """Apply whichever sharing block ``p`` parameterises."""
    if isinstance(p, FsmParams):
        return fsm_forward(fd, fs, p)
    if isinstance(p, LsuParams):
        return lsu_forward(fd, fs, p)
    raise TypeError(f"not a sharing block: {type(p).__name__}")


def normalize_map(m):
    """Min-max normalise to [0, 1]; a constant map becomes zeros with a warning."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        warnings.warn("allocated feature map is constant; emitting zeros", RuntimeWarning, stacklevel=2)
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def allocated_features(fd, fs, params, which, branch):
    """Channel-summed, normalised allocation routed to ``branch`` ("depth" or "seg").

    ``fd``/``fs`` are single ``C x H x W`` maps; ``which`` is "FSM" or "LSU".
    """
    which = which.upper()
    if which == "FSM":
        if not isinstance(params, FsmParams):
            raise TypeError("FSM allocation needs FsmParams")
        alloc_d, alloc_s = fsm_allocations(fd, fs, params)
    elif which == "LSU":
        if not isinstance(params, LsuParams):
            raise TypeError("LSU allocation needs LsuParams")
        alloc_d, alloc_s = lsu_allocations(fd, fs, params)
    else:
        raise ValueError(f"unknown block kind {which!r}")
    if branch not in ("depth", "seg"):
        raise ValueError(f"branch must be 'depth' or 'seg', got {branch!r}")
    alloc = alloc_d if branch == "depth" else alloc_s
    return normalize_map(alloc.data.sum(axis=-3))
