"""Gradient optimization of sparse radiance fields from posed images.

Coarse-to-fine: a visual-hull seed at the coarsest resolution, stochastic
photometric descent with total-variation smoothing, then prune and
trilinearly subdivide at each stage boundary. Whole fits use all training
views and view-dependent color (d=12); partial fits use 1 or 3 views and
plain RGB (d=3).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .cameras import RayBundle, generate_rays, spherical_rig, CameraView
from .errors import ConfigurationError, ContractError, DegenerateFitError
from .field import SparseRadianceField, grid_to_world
from .metrics import psnr
from .render import (
    GridIndex,
    RenderConfig,
    SH_C0,
    max_composite_weights,
    render_backward,
    render_image,
    render_rays,
)

INIT_DENSITY = 0.1
GRAY_LEVEL = 0.5


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 3600  # split evenly across resolution stages
    learning_rate_density: float = 1.0e4
    learning_rate_color: float = 1.0e3
    tv_weight_density: float = 1e-6
    tv_weight_color: float = 1e-6
    prune_threshold: float = 1e-3
    rays_per_step: int = 4096
    resolution_schedule: tuple = (8, 16, 32)
    color_dim: int = 12
    init_density: float = 10.0  # hull seed density, world units
    lr_density_resolution_scaling: bool = True
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigurationError("iterations must be positive")
        res = tuple(self.resolution_schedule)
        if not res or list(res) != sorted(res):
            raise ConfigurationError("resolution_schedule must be ascending")
        for prev, nxt in zip(res, res[1:]):
            if nxt not in (2 * prev, 4 * prev):
                raise ConfigurationError(
                    "consecutive resolutions must grow by x2 or x4"
                )
        if self.color_dim not in (3, 12):
            raise ConfigurationError("color_dim must be 3 or 12")
        object.__setattr__(self, "resolution_schedule", res)

    @property
    def upsample_schedule(self):
        """Iteration indices at which the grid is subdivided."""
        n = len(self.resolution_schedule)
        per = self.iterations // n
        return tuple(per * (s + 1) for s in range(n - 1))


@dataclass
class FitReport:
    final_train_psnr: float
    stages: list  # per stage: resolution, iterations, train_psnr, num_voxels
    loss_curve: list = field(default_factory=list)  # per-step batch MSE

    def as_dict(self):
        return asdict(self)


def tv_penalty(srf, density_weight=1.0, color_weight=1.0):
    """Total-variation penalty over face-adjacent occupied voxel pairs.

    Mean over pairs of squared feature differences (density and color terms
    weighted separately); returns (value, d_density, d_radiance).
    """
    m = srf.num_voxels
    d = srf.color_dim
    g_density = np.zeros(m, dtype=np.float64)
    g_radiance = np.zeros((m, d), dtype=np.float64)
    if m == 0:
        return 0.0, g_density, g_radiance
    keys = srf.packed_keys()
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    h = srf.resolution
    feats = srf.features.astype(np.float64)
    offsets = [np.int64(h * h), np.int64(h), np.int64(1)]
    pairs_a, pairs_b = [], []
    for axis, off in enumerate(offsets):
        eligible = np.nonzero(srf.coords[:, axis] + 1 < h)[0]
        target = keys[eligible] + off
        pos = np.searchsorted(sorted_keys, target)
        pos = np.minimum(pos, m - 1)
        hit = sorted_keys[pos] == target
        pairs_a.append(eligible[hit])
        pairs_b.append(order[pos[hit]])
    a = np.concatenate(pairs_a)
    b = np.concatenate(pairs_b)
    n_pairs = a.size
    if n_pairs == 0:
        return 0.0, g_density, g_radiance
    diff = feats[a] - feats[b]
    w = np.empty(1 + d)
    w[0] = density_weight
    w[1:] = color_weight
    value = float(np.sum(w * diff**2) / n_pairs)
    grad = 2.0 * w * diff / n_pairs
    np.add.at(g_density, a, grad[:, 0])
    np.add.at(g_density, b, -grad[:, 0])
    np.add.at(g_radiance, a, grad[:, 1:])
    np.add.at(g_radiance, b, -grad[:, 1:])
    return value, g_density, g_radiance


def _probe_views(radius=2.5, n=26, res=48):
    from .cameras import CameraIntrinsics

    intr = CameraIntrinsics(width=res, height=res, focal=1.2 * res)
    return [CameraView(pose=p, intrinsics=intr) for p in spherical_rig(n, radius)]


def prune(srf, threshold, render_cfg=None, probe_views=None):
    """Drop voxels that are both near-transparent and visually irrelevant.

    A voxel is removed when its activated density and its maximum composite
    weight over a probe rig are both <= threshold.
    """
    if srf.num_voxels == 0:
        return srf
    render_cfg = render_cfg or RenderConfig()
    if render_cfg.sigma_activation == "relu":
        act = np.maximum(srf.density.astype(np.float64), 0.0)
    else:
        act = np.exp(srf.density.astype(np.float64))
    keep = act > threshold
    if not np.all(keep):
        views = probe_views or _probe_views()
        grid = GridIndex(srf)
        maxw = np.zeros(srf.num_voxels)
        for view in views:
            rays = generate_rays(view)
            maxw = np.maximum(
                maxw, max_composite_weights(srf, rays, render_cfg, grid=grid)
            )
        keep = keep | (maxw > threshold)
    return SparseRadianceField.from_arrays(
        srf.resolution,
        srf.color_dim,
        srf.coords[keep],
        srf.features[keep],
        validate=False,
        dtype=srf.features.dtype,
    )


_CHILD_OFFSETS = np.array(
    [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.int64
)
_NEIGHBOR_OFFSETS = np.array(
    [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)],
    dtype=np.int64,
)


def _upsample_once(srf, new_h):
    old_h = srf.resolution
    if srf.num_voxels == 0:
        return SparseRadianceField.from_arrays(
            new_h, srf.color_dim,
            np.empty((0, 3), dtype=np.int32),
            np.empty((0, 1 + srf.color_dim), dtype=srf.features.dtype),
            validate=False, dtype=srf.features.dtype,
        )
    from .render import sample_trilinear

    coords = srf.coords.astype(np.int64)
    # candidate parents: occupied voxels plus their 26-neighborhood, so the
    # fine lattice covers the whole footprint of the coarse interpolant
    parents = (coords[:, None, :] + _NEIGHBOR_OFFSETS[None, :, :]).reshape(-1, 3)
    parents = parents[np.all((parents >= 0) & (parents < old_h), axis=1)]
    parents = np.unique(parents, axis=0)
    children = (2 * parents[:, None, :] + _CHILD_OFFSETS[None, :, :]).reshape(-1, 3)
    children = children[np.all(children < new_h, axis=1)]
    pos_old = children.astype(np.float64) * ((old_h - 1) / (new_h - 1))
    grid = GridIndex(srf)
    feats = sample_trilinear(srf, pos_old, grid=grid)
    ones_field = SparseRadianceField.from_arrays(
        old_h, 3, srf.coords, np.ones((srf.num_voxels, 4)),
        validate=False, dtype=np.float64,
    )
    weight = sample_trilinear(ones_field, pos_old)[:, 0]
    keep = weight > 0.0
    return SparseRadianceField.from_arrays(
        new_h, srf.color_dim, children[keep].astype(np.int32),
        feats[keep].astype(srf.features.dtype),
        validate=False, dtype=srf.features.dtype,
    )


def upsample(srf, new_h):
    """Resample onto a x2 or x4 finer grid.

    New voxels sit wherever the coarse trilinear interpolant is supported
    (children of occupied voxels and of their neighbors) and carry the
    interpolant's value at their own position, so renders are preserved up
    to lattice-alignment error and constant regions subdivide exactly.
    """
    if new_h == 2 * srf.resolution:
        return _upsample_once(srf, new_h)
    if new_h == 4 * srf.resolution:
        return _upsample_once(_upsample_once(srf, 2 * srf.resolution), new_h)
    raise ConfigurationError(
        f"upsample target must be x2 or x4 of H={srf.resolution}, got {new_h}"
    )


def _visual_hull(views, images, h, min_votes):
    """Occupied coordinates whose centers project inside enough silhouettes."""
    g = np.arange(h)
    ii, jj, kk = np.meshgrid(g, g, g, indexing="ij")
    centers = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    world = grid_to_world(centers, h)
    votes = np.zeros(world.shape[0], dtype=np.int64)
    for view, img in zip(views, images):
        rot = view.pose[:3, :3]
        cam = (world - view.pose[:3, 3]) @ rot
        in_front = cam[:, 2] < 0.0
        z = np.where(in_front, -cam[:, 2], 1.0)
        f = view.intrinsics.focal
        px = cam[:, 0] / z * f + view.intrinsics.width / 2.0 - 0.5
        py = -cam[:, 1] / z * f + view.intrinsics.height / 2.0 - 0.5
        ix = np.round(px).astype(np.int64)
        iy = np.round(py).astype(np.int64)
        ok = (
            in_front
            & (ix >= 0) & (ix < view.intrinsics.width)
            & (iy >= 0) & (iy < view.intrinsics.height)
        )
        alpha = np.zeros(world.shape[0])
        alpha[ok] = img.alpha[iy[ok], ix[ok]]
        votes += alpha > 0.5
    occupied = centers[votes >= min_votes]
    return occupied.astype(np.int32)


def _init_field(views, images, h, color_dim, init_density=INIT_DENSITY):
    min_votes = max(1, len(views) // 4)
    coords = _visual_hull(views, images, h, min_votes)
    if coords.shape[0] == 0:
        # nothing silhouetted anywhere: seed a small center block and let
        # the photometric term dissolve it if the scene really is empty
        c = h // 2
        span = np.array([c - 1, c], dtype=np.int32)
        coords = np.stack(
            np.meshgrid(span, span, span, indexing="ij"), axis=-1
        ).reshape(-1, 3)
    feats = np.zeros((coords.shape[0], 1 + color_dim), dtype=np.float64)
    feats[:, 0] = init_density
    if color_dim == 3:
        feats[:, 1:] = GRAY_LEVEL
    else:
        for ch in range(3):
            feats[:, 1 + 4 * ch] = GRAY_LEVEL / SH_C0
    return SparseRadianceField.from_arrays(
        h, color_dim, coords, feats, validate=False, dtype=np.float64
    )


def _flatten_targets(views, images):
    bundles = [generate_rays(v) for v in views]
    origins = np.concatenate([b.origins for b in bundles])
    dirs = np.concatenate([b.directions for b in bundles])
    near = min(b.near for b in bundles)
    far = max(b.far for b in bundles)
    targets = np.concatenate(
        [img.rgb.reshape(-1, 3).astype(np.float64) for img in images]
    )
    return origins, dirs, near, far, targets


def _mean_train_psnr(srf, views, images, render_cfg, grid=None):
    vals = [
        psnr(render_image(srf, v, render_cfg, grid=grid), img)
        for v, img in zip(views, images)
    ]
    return float(np.mean(vals))


def fit_srf(views, images, cfg=None, seed=0):
    """Optimize a field against posed images; returns (field, report).

    Deterministic for a fixed (dataset, config, seed). Raises
    DegenerateFitError when the loss turns non-finite or pruning empties the
    grid mid-schedule.
    """
    cfg = cfg or FitConfig()
    if len(views) < 1 or len(views) != len(images):
        raise ContractError("need at least one view with matching images")
    rng = np.random.default_rng(seed)
    origins, dirs, near, far, targets = _flatten_targets(views, images)
    n_pixels = origins.shape[0]
    # a dataset with no silhouetted pixel anywhere legitimately fits to an
    # (almost) empty field; only then is an empty grid a valid outcome
    has_foreground = any(float(img.alpha.max()) >= 1.0 for img in images)

    schedule = cfg.resolution_schedule
    steps_per_stage = cfg.iterations // len(schedule)
    srf = _init_field(views, images, schedule[0], cfg.color_dim, cfg.init_density)
    stages = []
    loss_curve = []
    probe = _probe_views()
    for stage, h in enumerate(schedule):
        grid = GridIndex(srf)
        feats = srf.features
        lr_density = cfg.learning_rate_density
        if cfg.lr_density_resolution_scaling:
            # density gradients scale with the world step length; this keeps
            # per-step update magnitudes resolution independent
            lr_density *= (h - 1) / 2.0
        for it in range(steps_per_stage):
            sel = rng.integers(0, n_pixels, size=cfg.rays_per_step)
            rays = RayBundle(
                origins=origins[sel], directions=dirs[sel], near=near, far=far
            )
            out = render_rays(srf, rays, cfg.render, grid=grid)
            residual = out.rgb - targets[sel]
            loss_curve.append(float(np.mean(residual**2)))
            d_rgb = (2.0 / residual.size) * residual
            grads = render_backward(srf, rays, cfg.render, d_rgb, grid=grid)
            g_density = grads.d_density
            g_radiance = grads.d_radiance
            if cfg.tv_weight_density > 0 or cfg.tv_weight_color > 0:
                _, tv_gd, tv_gr = tv_penalty(
                    srf, cfg.tv_weight_density, cfg.tv_weight_color
                )
                g_density = g_density + tv_gd
                g_radiance = g_radiance + tv_gr
            feats[:, 0] -= lr_density * g_density
            feats[:, 1:] -= cfg.learning_rate_color * g_radiance
            if it % 100 == 0 and not np.all(np.isfinite(feats)):
                raise DegenerateFitError(
                    f"non-finite parameters at stage {stage} iteration {it}"
                )
        if not np.all(np.isfinite(feats)):
            raise DegenerateFitError(f"non-finite parameters at stage {stage} end")
        srf = prune(srf, cfg.prune_threshold, cfg.render, probe_views=probe)
        stage_psnr = _mean_train_psnr(srf, views, images, cfg.render)
        stages.append(
            {
                "resolution": h,
                "iterations": steps_per_stage,
                "train_psnr": stage_psnr,
                "num_voxels": int(srf.num_voxels),
            }
        )
        if srf.num_voxels == 0 and has_foreground:
            raise DegenerateFitError(
                f"no voxels survived pruning after stage {stage}"
            )
        last = stage == len(schedule) - 1
        if not last and srf.num_voxels:
            srf = upsample(srf, schedule[stage + 1])
    report = FitReport(
        final_train_psnr=stages[-1]["train_psnr"],
        stages=stages,
        loss_curve=loss_curve,
    )
    # quantize the artifact to storage precision so saved and in-memory
    # fields are identical
    srf = SparseRadianceField.from_arrays(
        srf.resolution, srf.color_dim, srf.coords,
        srf.features.astype(np.float32), validate=False,
    )
    return srf, report


def fit_partial(views, images, cfg=None, seed=0):
    """Few-view fit producing a plain-RGB (d=3) field on a short schedule."""
    if len(views) not in (1, 3):
        raise ContractError(f"partial fits take exactly 1 or 3 views, got {len(views)}")
    if cfg is None:
        cfg = FitConfig(
            iterations=1200,
            resolution_schedule=(16, 32),
            color_dim=3,
        )
    if cfg.color_dim != 3:
        raise ConfigurationError("partial fits use color_dim=3")
    srf, _ = fit_srf(views, images, cfg, seed=seed)
    return srf
