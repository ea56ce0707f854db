"""Procedural indoor scenes with aligned RGB, metric depth and labels.

A pinhole camera looks down +z (y points down) at a back wall and a floor.
Boxes, spheres, wall panels and openings into a recess are placed in front;
each pixel shows the nearest surface.  Everything is a pure function of
``(config.seed, index)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tns

FLOOR, WALL, BOX, BLOB, PANEL, VOID = range(6)
CLASS_NAMES = ("floor", "wall", "box", "blob", "panel", "void")
DEPTH_MIN, DEPTH_MAX = 0.5, 10.0

BASE_COLORS = np.array([
    [0.55, 0.40, 0.25],  # floor
    [0.80, 0.80, 0.72],  # wall
    [0.20, 0.35, 0.80],  # box
    [0.85, 0.20, 0.20],  # blob
    [0.25, 0.70, 0.30],  # panel
    [0.08, 0.08, 0.12],  # void
])


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    n_classes: int = 6
    min_shapes: int = 1
    max_shapes: int = 3
    invalid_fraction: float = 0.03
    illumination_gradient: bool = False

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes (floor and wall)")
        if self.height % 8 or self.width % 8 or self.height <= 0 or self.width <= 0:
            raise ValueError(f"image size {self.height}x{self.width} must be positive and divisible by 8")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        if not 0 <= self.invalid_fraction < 1:
            raise ValueError("invalid_fraction must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class SceneSample:
    rgb: np.ndarray  # 3 x H x W in [0, 1]
    depth: np.ndarray  # H x W metres, 0 = invalid
    labels: np.ndarray  # H x W int
    mask: np.ndarray = field(default=None)  # H x W bool, depth > 0

    def __post_init__(self):
        if self.mask is None:
            self.mask = self.depth > 0


# -- geometry ------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    focal: float
    cx: float
    cy: float
    height: int
    width: int

    def rays(self):
        """Per-pixel ray direction components (x, y) for z = 1, through pixel centres."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return (u + 0.5 - self.cx) / self.focal, (v + 0.5 - self.cy) / self.focal


@dataclass(frozen=True)
class Surface:
    """One analytic surface; ``kind`` selects the depth formula."""

    kind: str  # wall | floor | rect | sphere
    label: int
    color: tuple
    params: dict

    def depth(self, cam):
        """Depth (z) where the surface is hit, +inf elsewhere."""
        rx, ry = cam.rays()
        p = self.params
        inf = np.full(rx.shape, np.inf)
        if self.kind == "wall":
            hit = np.full(rx.shape, True)
            for x0, x1, y0, y1 in p.get("holes", ()):
                x, y = rx * p["z"], ry * p["z"]
                hit &= ~((x >= x0) & (x <= x1) & (y >= y0) & (y <= y1))
            return np.where(hit, p["z"], inf)
        if self.kind == "floor":
            with np.errstate(divide="ignore"):
                z = np.where(ry > 0, p["y"] / np.where(ry > 0, ry, 1.0), np.inf)
            return np.where(z <= p["z_max"], z, inf)
        if self.kind == "rect":
            z = p["z"]
            x, y = rx * z, ry * z
            inside = (x >= p["x0"]) & (x <= p["x1"]) & (y >= p["y0"]) & (y <= p["y1"])
            return np.where(inside, z, inf)
        if self.kind == "sphere":
            cx, cy, cz, r = p["center"] + (p["radius"],)
            a = rx * rx + ry * ry + 1.0
            b = -2.0 * (rx * cx + ry * cy + cz)
            c = cx * cx + cy * cy + cz * cz - r * r
            disc = b * b - 4 * a * c
            with np.errstate(invalid="ignore"):
                t = (-b - np.sqrt(np.where(disc >= 0, disc, 0.0))) / (2 * a)
            return np.where(disc >= 0, t, inf)
        raise ValueError(f"unknown surface kind {self.kind}")


def _camera(cfg):
    # principal point above centre: the horizon sits at a quarter of the image height
    return Camera(focal=1.0 * cfg.width, cx=cfg.width / 2, cy=cfg.height / 4, height=cfg.height, width=cfg.width)


def _jitter(rng, label):
    return tuple(np.clip(BASE_COLORS[label % len(BASE_COLORS)] + rng.uniform(-0.08, 0.08, 3), 0, 1))


def _wall_rect(rng, half_w, wall_z, cam_h, side=None):
    """Centre, width, top and height of a rectangle on the wall plane."""
    w = rng.uniform(0.55, 0.85) * half_w
    hgt = rng.uniform(0.5, 0.75) * half_w
    if side is None:
        xc = rng.uniform(-0.5, 0.5) * half_w
    else:
        xc = side * 0.5 * half_w
    ceiling = -0.2 * wall_z
    top = rng.uniform(ceiling, max(ceiling, cam_h - hgt - 0.2))
    return xc, w, top, hgt


def scene_layout(cfg, index):
    """The camera and the list of surfaces making up scene ``index``."""
    rng = np.random.default_rng([cfg.seed, index])
    cam = _camera(cfg)
    cam_h = rng.uniform(1.5, 1.8)
    wall_z = rng.uniform(4.0, 6.5)
    half_w = wall_z * cfg.width / 2 / cam.focal  # wall half-width visible at z = wall_z
    surfaces = []

    shape_classes = [c for c in range(2, cfg.n_classes)]
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1)) if shape_classes else 0
    n_shapes = min(n_shapes, len(shape_classes))
    chosen = rng.choice(shape_classes, size=n_shapes, replace=False) if n_shapes else []

    holes = []
    # panel and void share the wall, so each gets its own half when both appear
    on_wall = [c for c in chosen if c in (PANEL, VOID)]
    sides = dict(zip(on_wall, rng.permutation([-1.0, 1.0]))) if len(on_wall) == 2 else {}
    for label in sorted(int(c) for c in chosen):
        kind = label if label < 6 else BOX
        color = _jitter(rng, label)
        if kind == BOX:
            z = rng.uniform(1.8, wall_z - 1.0)
            w = rng.uniform(1.2, 2.0)
            hgt = rng.uniform(0.9, 1.4)
            xc = rng.uniform(-0.5, 0.5) * z * cfg.width / cam.focal * 0.6
            params = {"z": z, "x0": xc - w / 2, "x1": xc + w / 2, "y0": cam_h - hgt, "y1": cam_h}
            surfaces.append(Surface("rect", label, color, params))
        elif kind == BLOB:
            r = rng.uniform(0.5, 0.7)
            z = rng.uniform(2.2, wall_z - 1.0)
            xc = rng.uniform(-0.5, 0.5) * z * cfg.width / cam.focal * 0.6
            yc = cam_h - r - rng.uniform(0.0, 0.6)
            surfaces.append(Surface("sphere", label, color, {"center": (xc, yc, z), "radius": r}))
        elif kind == PANEL:
            z = wall_z - rng.uniform(0.6, 0.9)
            xc, w, top, hgt = _wall_rect(rng, half_w, wall_z, cam_h, sides.get(label))
            params = {"z": z, "x0": xc - w / 2, "x1": xc + w / 2, "y0": top, "y1": top + hgt}
            surfaces.append(Surface("rect", label, color, params))
        elif kind == VOID:
            xc, w, top, hgt = _wall_rect(rng, half_w, wall_z, cam_h, sides.get(label))
            hole = (xc - w / 2, xc + w / 2, top, top + hgt)
            holes.append(hole)
            z = min(wall_z + rng.uniform(0.8, 1.5), DEPTH_MAX)
            # the recess is visible only through the opening in the wall
            x0, x1 = hole[0] * z / wall_z, hole[1] * z / wall_z
            y0, y1 = hole[2] * z / wall_z, hole[3] * z / wall_z
            surfaces.append(Surface("rect", label, color, {"z": z, "x0": x0, "x1": x1, "y0": y0, "y1": y1}))

    surfaces.insert(0, Surface("floor", FLOOR, _jitter(rng, FLOOR), {"y": cam_h, "z_max": wall_z}))
    surfaces.insert(0, Surface("wall", WALL, _jitter(rng, WALL), {"z": wall_z, "holes": tuple(holes)}))
    extras = {
        "invalid_seed": int(rng.integers(2**31)),
        "light": (rng.uniform(0, cfg.width), rng.uniform(0, cfg.height / 2), rng.uniform(0.4, 0.7)),
    }
    return cam, surfaces, extras


def render(cam, surfaces):
    """Z-buffer the surfaces: per-pixel nearest depth and the index of the winning surface."""
    depth = np.full((cam.height, cam.width), np.inf)
    owner = np.full((cam.height, cam.width), -1, dtype=np.int64)
    for i, s in enumerate(surfaces):
        d = s.depth(cam)
        closer = d < depth
        depth[closer] = d[closer]
        owner[closer] = i
    if np.any(owner < 0):
        raise RuntimeError("scene has pixels not covered by any surface")
    return depth, owner


def generate_scene(cfg, index):
    """Render scene ``index``; bit-identical for the same ``(cfg, index)``."""
    cam, surfaces, extras = scene_layout(cfg, index)
    depth, owner = render(cam, surfaces)
    labels = np.array([s.label for s in surfaces], dtype=np.int64)[owner]
    colors = np.array([s.color for s in surfaces])[owner]  # H x W x 3
    shade = np.clip(1.15 - 0.06 * depth, 0.35, 1.0)
    rgb = colors * shade[..., None]
    if cfg.illumination_gradient:
        lx, ly, strength = extras["light"]
        v, u = np.mgrid[0:cfg.height, 0:cfg.width]
        spread = 0.35 * cfg.width
        rgb = rgb + strength * np.exp(-((u - lx) ** 2 + (v - ly) ** 2) / (2 * spread ** 2))[..., None]
    rgb = np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1).copy()
    depth = np.clip(depth, DEPTH_MIN, DEPTH_MAX)
    if cfg.invalid_fraction > 0:
        drop = np.random.default_rng(extras["invalid_seed"]).random(depth.shape) < cfg.invalid_fraction
        depth = np.where(drop, 0.0, depth)
    return SceneSample(rgb=rgb, depth=depth, labels=labels)


def generate_dataset(cfg, count):
    return [generate_scene(cfg, i) for i in range(count)]


def augment_hflip(sample, apply):
    """Mirror every map of ``sample`` about the vertical axis when ``apply`` is true."""
    if not apply:
        return sample
    return SceneSample(
        rgb=sample.rgb[..., ::-1].copy(),
        depth=sample.depth[..., ::-1].copy(),
        labels=sample.labels[..., ::-1].copy(),
        mask=sample.mask[..., ::-1].copy(),
    )


def validate_sample(sample, n_classes):
    rgb, depth, labels = sample.rgb, sample.depth, sample.labels
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DatasetError(f"rgb must be 3xHxW, got {rgb.shape}")
    if depth.shape != rgb.shape[1:] or labels.shape != rgb.shape[1:]:
        raise DatasetError("rgb, depth and labels disagree spatially")
    if rgb.min() < 0 or rgb.max() > 1:
        raise DatasetError("rgb values outside [0, 1]")
    nz = depth[depth != 0]
    if np.any(nz < DEPTH_MIN) or np.any(nz > DEPTH_MAX):
        raise DatasetError(f"depth outside {{0}} U [{DEPTH_MIN}, {DEPTH_MAX}]")
    if np.any(labels != np.round(labels)) or labels.min() < 0 or labels.max() >= n_classes:
        raise DatasetError(f"labels must be integers in [0, {n_classes})")
    if not (depth > 0).any():
        raise DatasetError("sample has no valid depth pixels")


# -- persistence ------------------------------------------------------------------

KINDS = ("rgb", "depth", "label")


def write_dataset(directory, samples, cfg, overwrite=False):
    """Write samples as ``NNNN.{rgb,depth,label}.tns`` plus ``manifest.json``."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not overwrite:
        raise DatasetError(f"{directory} is not empty")
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        entry = {"index": i}
        for kind, arr in zip(KINDS, (s.rgb, s.depth, s.labels)):
            name = f"{i:04d}.{kind}.tns"
            entry[kind] = {"file": name, "sha256": tns.save(directory / name, arr)}
        entries.append(entry)
    manifest = {
        "schema": 1,
        "count": len(samples),
        "config": cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg),
        "samples": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_dataset(directory):
    """Load and verify a dataset directory; returns ``(samples, manifest)``."""
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"{path} not found")
    manifest = json.loads(path.read_text())
    if len(manifest["samples"]) != manifest["count"]:
        raise DatasetError("manifest count does not match its sample list")
    n_classes = int(manifest["config"]["n_classes"])
    samples = []
    for entry in manifest["samples"]:
        arrays = {}
        for kind in KINDS:
            ref = entry[kind]
            try:
                arrays[kind] = tns.load(directory / ref["file"], sha256=ref["sha256"])
            except tns.TnsFormatError as exc:
                raise DatasetError(str(exc)) from exc
        sample = SceneSample(rgb=arrays["rgb"], depth=arrays["depth"], labels=arrays["label"].astype(np.int64))
        if np.any(arrays["label"] != sample.labels):
            raise DatasetError(f"{entry['label']['file']}: non-integral labels")
        try:
            validate_sample(sample, n_classes)
        except DatasetError as exc:
            raise DatasetError(f"sample {entry['index']}: {exc}") from exc
        samples.append(sample)
    return samples, manifest


def stack(samples):
    """Batch arrays ``(rgb, depth, labels, mask)`` with a leading sample axis."""
    return (
        np.stack([s.rgb for s in samples]),
        np.stack([s.depth for s in samples]),
        np.stack([s.labels for s in samples]),
        np.stack([s.mask for s in samples]),
    )
