"""2-D convolution (cross-correlation) with stride, dilation and groups."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor


def same_padding(kernel_size, dilation=1):
    """Zero padding that keeps a stride-1 output the size of its input."""
    return ((kernel_size - 1) * dilation) // 2


def output_size(size, kernel_size, stride, dilation, padding):
    extent = (kernel_size - 1) * dilation + 1
    return (size + 2 * padding - extent) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    # xp: (B, C, Hp, Wp) -> (B, C, kh*kw, oh*ow)
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh * kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, i * kw + j] = xp[:, :, r0:r0 + stride * (oh - 1) + 1:stride, c0:c0 + stride * (ow - 1) + 1:stride]
    return cols.reshape(b, c, kh * kw, oh * ow)


def _col2im(dcols, shape, kh, kw, stride, dilation, oh, ow):
    b, c, hp, wp = shape
    out = np.zeros(shape)
    dcols = dcols.reshape(b, c, kh * kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            out[:, :, r0:r0 + stride * (oh - 1) + 1:stride, c0:c0 + stride * (ow - 1) + 1:stride] += dcols[:, :, i * kw + j]
    return out


def conv2d(x, kernel, bias=None, stride=1, dilation=1, groups=1, padding=None):
    """Convolve ``x`` of shape (C_in, H, W) or (B, C_in, H, W).

    ``kernel`` is (C_out, C_in // groups, kh, kw).  ``padding`` defaults to
    "same" padding for the dilated kernel extent.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = as_tensor(bias) if bias is not None else None
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be CxHxW or BxCxHxW, got {x.shape}")
    xd = x.data[None] if squeeze else x.data
    bsz, cin, h, w = xd.shape
    cout, cin_g, kh, kw = kernel.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: kernel expects {cin_g * groups} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if kh != kw:
        pad_h, pad_w = same_padding(kh, dilation), same_padding(kw, dilation)
    else:
        pad_h = pad_w = same_padding(kh, dilation)
    if padding is not None:
        pad_h = pad_w = padding
    ext_h, ext_w = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    if ext_h > h + 2 * pad_h or ext_w > w + 2 * pad_w:
        raise ShapeError("conv2d: kernel larger than padded input")
    oh = output_size(h, kh, stride, dilation, pad_h)
    ow = output_size(w, kw, stride, dilation, pad_w)

    if pad_h or pad_w:
        xp = np.zeros((bsz, cin, h + 2 * pad_h, w + 2 * pad_w))
        xp[:, :, pad_h:pad_h + h, pad_w:pad_w + w] = xd
    else:
        xp = xd
    cout_g = cout // groups
    kk = kh * kw
    if kk == 1 and stride == 1:
        cols = xp.reshape(bsz, groups, cin_g, oh * ow)
    else:
        cols = _im2col(xp, kh, kw, stride, dilation, oh, ow).reshape(bsz, groups, cin_g * kk, oh * ow)
    wmat = kernel.data.reshape(groups, cout_g, cin_g * kk)
    out = np.matmul(wmat, cols).reshape(bsz, cout, oh, ow)
    if bias is not None:
        out += bias.data[:, None, None]
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = (g[None] if squeeze else g).reshape(bsz, groups, cout_g, oh * ow)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.matmul(g4, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 3)).reshape(cout)
        if x.requires_grad:
            dcols = np.matmul(np.swapaxes(wmat, -1, -2), g4)
            if kk == 1 and stride == 1:
                dxp = dcols.reshape(xp.shape)
            else:
                dxp = _col2im(dcols.reshape(bsz, cin, kk, oh * ow), xp.shape, kh, kw, stride, dilation, oh, ow)
            gx = dxp[:, :, pad_h:pad_h + h, pad_w:pad_w + w]
            if squeeze:
                gx = gx[0]
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")
