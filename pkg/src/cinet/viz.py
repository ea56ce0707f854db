"""Binary PGM/PPM writers for depth maps, label maps and attention rows."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import DEPTH_MAX, DEPTH_MIN

PALETTE = np.array(
    [
        [140, 100, 60],   # floor
        [220, 220, 200],  # wall
        [50, 90, 220],    # box
        [220, 50, 50],    # blob
        [60, 180, 80],    # panel
        [20, 20, 30],     # void
        [200, 160, 40],
        [150, 60, 180],
    ],
    dtype=np.uint8,
)


def write_pgm(path, image):
    """8-bit greyscale, binary (P5)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


def write_ppm(path, image):
    """8-bit colour, binary (P6); ``image`` is H x W x 3 uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("PPM needs an H x W x 3 uint8 array")
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image).tobytes())


def read_pnm(path):
    """Read back a binary PGM/PPM written by this module."""
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255:
        raise ValueError("only 8-bit images are supported")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if magic == b"P5" else arr.reshape(h, w, 3)


def unit_to_u8(values):
    return np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)


def depth_image(depth, lo=DEPTH_MIN, hi=DEPTH_MAX):
    """Linear map of ``[lo, hi]`` metres onto 0..255; invalid (0) pixels map to 0."""
    depth = np.asarray(depth, dtype=np.float64)
    return unit_to_u8((depth - lo) / (hi - lo))


def label_image(labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= len(PALETTE):
        raise ValueError(f"palette covers labels 0..{len(PALETTE) - 1}")
    return PALETTE[labels]


def attention_row(attention, pixel, size):
    """Row of an N x N map for ``pixel = (r, c)`` reshaped to the ``size`` grid."""
    attention = np.asarray(attention)
    h, w = size
    if attention.shape != (h * w, h * w):
        raise ValueError(f"attention map {attention.shape} does not match grid {h}x{w}")
    r, c = pixel
    return attention[r * w + c].reshape(h, w)


def feature_energy(features):
    """Channel sum of a ``C x H x W`` feature map, min-max normalised to [0, 1]."""
    energy = np.asarray(features, dtype=np.float64).sum(axis=0)
    span = energy.max() - energy.min()
    if span == 0:
        return np.zeros_like(energy)
    return (energy - energy.min()) / span
