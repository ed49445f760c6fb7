"""Procedural ground-truth scenes, a reference sphere tracer, and dataset
emission/loading.

Scenes are analytic signed distance fields with albedo functions, confined
to [-0.8, 0.8]^3 so the whole object sits inside the voxel cube. The
reference tracer shades hits with a Lambert term against a headlight
(light direction opposite the ray), which gives view-dependent brightness
while staying exactly reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import CameraIntrinsics, CameraView, Split, generate_rays
from .cameras import random_ood_views, random_sphere_views, spherical_rig
from .errors import ConfigurationError, SrfError

SCENE_KINDS = ("sphere", "box", "torus", "two_spheres", "checker_sphere")
MANIFEST_SCHEMA_VERSION = 1

_TRACE_EPS = 1e-5
_TRACE_MAX_STEPS = 256
_NORMAL_H = 1e-4


@dataclass(frozen=True)
class AnalyticScene:
    name: str
    sdf: callable  # (N, 3) world points -> (N,) signed distances
    albedo: callable  # (N, 3) world points -> (N, 3) colors in [0, 1]


@dataclass
class ImageBuffer:
    """Float RGBA image, all channels in [0, 1], row-major top to bottom."""

    width: int
    height: int
    rgba: np.ndarray  # (height, width, 4)

    @property
    def rgb(self):
        return self.rgba[..., :3]

    @property
    def alpha(self):
        return self.rgba[..., 3]


def _check_extent(extent):
    if extent > 0.8:
        raise ConfigurationError(
            f"scene extends to {extent:.3f}, outside the [-0.8, 0.8]^3 budget"
        )


def make_scene(kind, **params):
    """Analytic scene from the fixed catalog.

    sphere: radius, color. box: half_extents, color. torus: major_radius,
    minor_radius, color. two_spheres: radius, separation. checker_sphere:
    radius, cells.
    """
    kind = str(kind).lower()
    if kind == "sphere":
        radius = float(params.get("radius", 0.5))
        color = np.asarray(params.get("color", (0.85, 0.3, 0.25)), dtype=np.float64)
        _check_extent(radius)

        def sdf(p):
            return np.linalg.norm(p, axis=-1) - radius

        def albedo(p):
            return np.broadcast_to(color, p.shape[:-1] + (3,)).copy()

        return AnalyticScene("sphere", sdf, albedo)

    if kind == "box":
        half = np.asarray(params.get("half_extents", (0.45, 0.35, 0.3)), float)
        color = np.asarray(params.get("color", (0.25, 0.45, 0.8)), dtype=np.float64)
        _check_extent(float(np.max(half)))

        def sdf(p):
            q = np.abs(p) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            return outside + inside

        def albedo(p):
            return np.broadcast_to(color, p.shape[:-1] + (3,)).copy()

        return AnalyticScene("box", sdf, albedo)

    if kind == "torus":
        major = float(params.get("major_radius", 0.5))
        minor = float(params.get("minor_radius", 0.2))
        color = np.asarray(params.get("color", (0.9, 0.7, 0.2)), dtype=np.float64)
        _check_extent(major + minor)

        def sdf(p):
            ring = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2) - major
            return np.sqrt(ring**2 + p[..., 2] ** 2) - minor

        def albedo(p):
            return np.broadcast_to(color, p.shape[:-1] + (3,)).copy()

        return AnalyticScene("torus", sdf, albedo)

    if kind == "two_spheres":
        radius = float(params.get("radius", 0.28))
        sep = float(params.get("separation", 0.38))
        _check_extent(sep + radius)
        c_a = np.array([sep, 0.0, 0.0])
        c_b = np.array([-sep, 0.0, 0.0])
        col_a = np.array([0.85, 0.25, 0.25])
        col_b = np.array([0.25, 0.65, 0.3])

        def sdf(p):
            da = np.linalg.norm(p - c_a, axis=-1) - radius
            db = np.linalg.norm(p - c_b, axis=-1) - radius
            return np.minimum(da, db)

        def albedo(p):
            da = np.linalg.norm(p - c_a, axis=-1)
            db = np.linalg.norm(p - c_b, axis=-1)
            out = np.where((da < db)[..., None], col_a, col_b)
            return out.astype(np.float64)

        return AnalyticScene("two_spheres", sdf, albedo)

    if kind == "checker_sphere":
        radius = float(params.get("radius", 0.5))
        cells = float(params.get("cells", 5.0))
        _check_extent(radius)
        col_a = np.array([0.9, 0.9, 0.85])
        col_b = np.array([0.2, 0.25, 0.5])

        def sdf(p):
            return np.linalg.norm(p, axis=-1) - radius

        def albedo(p):
            parity = np.floor(p * cells).sum(axis=-1) % 2
            return np.where((parity == 0)[..., None], col_a, col_b).astype(np.float64)

        return AnalyticScene("checker_sphere", sdf, albedo)

    raise ConfigurationError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")


def trace_reference(scene, view):
    """Sphere-trace the analytic scene from a camera view.

    Hit pixels: albedo times the Lambert factor against the headlight, alpha
    exactly 1. Misses: white background, alpha exactly 0.
    """
    rays = generate_rays(view)
    o = np.asarray(rays.origins)
    d = np.asarray(rays.directions)
    n = o.shape[0]
    t = np.full(n, rays.near)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(_TRACE_MAX_STEPS):
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        p = o[idx] + t[idx, None] * d[idx]
        dist = scene.sdf(p)
        close = dist < _TRACE_EPS
        hit[idx[close]] = True
        active[idx[close]] = False
        t[idx] += np.maximum(dist, _TRACE_EPS)
        too_far = t[idx] > rays.far
        active[idx[too_far]] = False

    intr = view.intrinsics
    rgba = np.zeros((n, 4), dtype=np.float32)
    rgba[:, :3] = 1.0  # background
    if np.any(hit):
        idx = np.nonzero(hit)[0]
        p = o[idx] + t[idx, None] * d[idx]
        normal = _sdf_normal(scene, p)
        lambert = np.clip(-np.sum(normal * d[idx], axis=-1), 0.0, 1.0)
        rgba[idx, :3] = (scene.albedo(p) * lambert[:, None]).astype(np.float32)
        rgba[idx, 3] = 1.0
    rgba = np.clip(rgba, 0.0, 1.0)
    return ImageBuffer(
        width=intr.width,
        height=intr.height,
        rgba=rgba.reshape(intr.height, intr.width, 4),
    )


def _sdf_normal(scene, p):
    h = _NORMAL_H
    grad = np.empty_like(p)
    for axis in range(3):
        dp = np.zeros(3)
        dp[axis] = h
        grad[:, axis] = scene.sdf(p + dp) - scene.sdf(p - dp)
    norms = np.linalg.norm(grad, axis=-1, keepdims=True)
    return grad / np.maximum(norms, 1e-12)


# -- image files -------------------------------------------------------------


def quantize8(values):
    """Round [0, 1] floats to the 8-bit lattice (still float in [0, 1])."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0) / 255.0


def save_png(image, path):
    data = np.round(np.clip(image.rgba, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGBA").save(path)


def load_png(path):
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGBA"), dtype=np.float32) / 255.0
    return ImageBuffer(width=data.shape[1], height=data.shape[0], rgba=data)


# -- dataset emission / loading ----------------------------------------------


@dataclass(frozen=True)
class RigSpec:
    train_views: int = 400
    test_views: int = 20
    ood_views: int = 10
    radius: float = 2.5
    ood_range: tuple = (0.5, 2.0)
    width: int = 64
    height: int = 64
    focal: float = 76.8  # 1.2 x width keeps the scene cube fully in frame


def build_views(rig, seed):
    """Train/test/OOD camera views for a rig specification."""
    intr = CameraIntrinsics(width=rig.width, height=rig.height, focal=rig.focal)
    views = []
    for pose in spherical_rig(rig.train_views, rig.radius):
        views.append(CameraView(pose=pose, intrinsics=intr, split=Split.TRAIN))
    for pose in random_sphere_views(rig.test_views, rig.radius, seed=seed + 1):
        views.append(CameraView(pose=pose, intrinsics=intr, split=Split.TEST))
    for pose in random_ood_views(
        rig.ood_views, rig.radius, rig.ood_range, seed=seed + 2
    ):
        views.append(CameraView(pose=pose, intrinsics=intr, split=Split.OOD))
    return views


def emit_dataset(scene, rig, out_dir, seed=0):
    """Render every rig view to PNG and write the manifest. Returns its path."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    views = build_views(rig, seed)
    records = []
    counters = {}
    for view in views:
        split = view.split.value
        idx = counters.get(split, 0)
        counters[split] = idx + 1
        rel = f"images/{split}_{idx:04d}.png"
        image = trace_reference(scene, view)
        save_png(image, out_dir / rel)
        records.append(
            {
                "pose": [float(v) for v in view.pose.reshape(-1)],
                "split": split,
                "image": rel,
            }
        )
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "scene": scene.name,
        "seed": seed,
        "intrinsics": {
            "width": rig.width,
            "height": rig.height,
            "focal": rig.focal,
        },
        "views": records,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def load_dataset(manifest_path):
    """Views and images in manifest order.

    Raises descriptive errors for missing files or dimension mismatches.
    """
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SrfError(f"malformed manifest {manifest_path}: {exc}") from exc
    intr_raw = manifest["intrinsics"]
    intr = CameraIntrinsics(
        width=int(intr_raw["width"]),
        height=int(intr_raw["height"]),
        focal=float(intr_raw["focal"]),
    )
    base = manifest_path.parent
    views, images = [], []
    for rec in manifest["views"]:
        pose = np.asarray(rec["pose"], dtype=np.float64).reshape(4, 4)
        views.append(
            CameraView(pose=pose, intrinsics=intr, split=Split(rec["split"]))
        )
        img_path = base / rec["image"]
        if not img_path.exists():
            raise SrfError(f"manifest references missing image file: {img_path}")
        image = load_png(img_path)
        if image.width != intr.width or image.height != intr.height:
            raise SrfError(
                f"image {img_path} is {image.width}x{image.height}, "
                f"manifest intrinsics say {intr.width}x{intr.height}"
            )
        images.append(image)
    return views, images
