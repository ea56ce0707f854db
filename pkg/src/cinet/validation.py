"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, multiple_of=8):
    """Return ``X`` as a float64 ``n x 3 x H x W`` array with values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_features=1, ensure_2d=False)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images shaped (n, 3, H, W), got {X.shape}")
    h, w = X.shape[-2:]
    if h % multiple_of or w % multiple_of:
        raise ValueError(f"image size {h}x{w} must be divisible by {multiple_of}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_targets(y, n_samples, image_shape, n_classes):
    """Split ``y`` (``n x 2 x H x W``: depth then labels) into depth and integer labels."""
    y = check_array(y, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if y.shape != (n_samples, 2) + tuple(image_shape):
        raise ValueError(f"expected targets shaped {(n_samples, 2) + tuple(image_shape)}, got {y.shape}")
    depth, labels = y[:, 0], y[:, 1]
    check_depth(depth)
    return depth, check_labels(labels, n_classes)


def check_depth(depth):
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth contains non-finite values")
    valid = depth > 0
    if np.any(depth < 0):
        raise ValueError("depth must be non-negative (0 marks invalid pixels)")
    if not valid.any():
        raise ValueError("depth has no valid pixels")
    return depth


def check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
        raise ValueError("labels must be integral")
    labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels


def check_image_size(size):
    """Validate a square image side length for the generator."""
    size = int(size)
    if size <= 0 or size % 8:
        raise ValueError(f"--size {size} must be a positive multiple of 8")
    return size


def check_pixel(pixel, shape):
    """Parse ``"r,c"`` (or a pair) and check it lies inside ``shape``."""
    if isinstance(pixel, str):
        parts = pixel.split(",")
        if len(parts) != 2:
            raise ValueError(f"pixel must be 'r,c', got {pixel!r}")
        try:
            pixel = tuple(int(p) for p in parts)
        except ValueError as exc:
            raise ValueError(f"pixel must be two integers, got {pixel!r}") from exc
    r, c = pixel
    if not (0 <= r < shape[0] and 0 <= c < shape[1]):
        raise ValueError(f"pixel ({r}, {c}) is outside the {shape[0]}x{shape[1]} attention grid")
    return int(r), int(c)
