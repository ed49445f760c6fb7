"""Differentiable volume rendering of sparse radiance fields.

Forward: march each ray at a fixed step, trilinearly interpolate density
and radiance, shade with degree-0/1 spherical harmonics, and composite
front to back over the configured background. Backward: analytic gradients
of the composited pixels with respect to every stored density and radiance
coefficient.

Two interchangeable kernel backends exist: a compiled Cython core and a
pure-NumPy fallback. The compiled one is picked at import when available;
set SRFKIT_FORCE_PYTHON=1 to force the fallback. `benchmarks/bench_render.py`
compares the two.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, ContractError
from ..field import world_to_grid

from . import _kernels_py

_COMPILED = None
if os.environ.get("SRFKIT_FORCE_PYTHON", "") != "1":
    try:
        from . import _kernels as _COMPILED  # type: ignore[attr-defined]
    except ImportError:
        _COMPILED = None

_backend = _COMPILED if _COMPILED is not None else _kernels_py

SH_C0 = _kernels_py.SH_C0
SH_C1 = _kernels_py.SH_C1

# Above this resolution the O(H^3) row-index volume is replaced by binary
# search over sorted voxel keys.
INDEX_VOLUME_MAX_H = 256

_ACTIVATIONS = {"relu": 0, "exp": 1}


def backend_name():
    """'compiled' when the Cython core is active, else 'python'."""
    return _backend.BACKEND_NAME


@dataclass(frozen=True)
class RenderConfig:
    # marching stride in voxel units; optical depth uses its world-unit
    # length so density values mean the same thing at every resolution
    step_size: float = 0.5
    sigma_activation: str = "relu"
    background: tuple = (1.0, 1.0, 1.0)
    stop_threshold: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.step_size <= 1.0:
            raise ConfigurationError("step_size must be in (0, 1]")
        if not 0.0 <= self.stop_threshold < 1.0:
            raise ConfigurationError("stop_threshold must be in [0, 1)")
        if self.sigma_activation not in _ACTIVATIONS:
            raise ConfigurationError(
                f"sigma_activation must be one of {sorted(_ACTIVATIONS)}"
            )


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (N, 3) in [0, 1]
    alpha: np.ndarray  # (N,)
    transmittance: np.ndarray  # (N,)


@dataclass
class RenderGradients:
    d_density: np.ndarray  # (M,)
    d_radiance: np.ndarray  # (M, d)


class GridIndex:
    """Voxel row lookup acceleration reused across render calls.

    Valid as long as the field's coordinate set is unchanged; feature values
    are referenced, not copied, so in-place feature updates are seen.
    """

    def __init__(self, srf):
        self.resolution = srf.resolution
        self.color_dim = srf.color_dim
        self.features = np.ascontiguousarray(srf.features, dtype=np.float64)
        keys = srf.packed_keys()
        if srf.resolution <= INDEX_VOLUME_MAX_H:
            vol = np.full(srf.resolution**3, -1, dtype=np.int32)
            vol[keys] = np.arange(keys.size, dtype=np.int32)
            self.index_vol = vol
            self.sorted_keys = np.empty(0, dtype=np.int64)
            self.perm = np.empty(0, dtype=np.int32)
        else:
            order = np.argsort(keys, kind="stable")
            self.index_vol = np.empty(0, dtype=np.int32)
            self.sorted_keys = np.ascontiguousarray(keys[order])
            self.perm = order.astype(np.int32)

    def kernel_args(self):
        return (
            self.index_vol,
            self.sorted_keys,
            self.perm,
            self.features,
            self.resolution,
            self.color_dim,
        )


def eval_sh(coeffs, direction):
    """RGB from radiance coefficients along a unit view direction.

    d=3 returns the coefficients as RGB; d=12 evaluates degree-0/1 real
    spherical harmonics per channel (channel-major coefficient layout).
    Output is clamped to [0, 1].
    """
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if coeffs.shape[0] not in (3, 12):
        raise ContractError(f"coefficient width must be 3 or 12, got {coeffs.shape[0]}")
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-3:
        raise ContractError("direction must be unit length")
    if coeffs.shape[0] == 3:
        lin = coeffs.copy()
    else:
        x, y, z = direction
        lin = np.empty(3)
        for ch in range(3):
            a = coeffs[4 * ch : 4 * ch + 4]
            lin[ch] = SH_C0 * a[0] + SH_C1 * (a[1] * y + a[2] * z + a[3] * x)
    return np.clip(lin, 0.0, 1.0)


def sample_trilinear(srf, points, grid=None):
    """Trilinear feature interpolation at float grid coordinates.

    Accepts one point (3,) or a batch (N, 3); positions outside [0, H-1]^3
    and absent voxels contribute zeros.
    """
    if grid is None:
        grid = GridIndex(srf)
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.ascontiguousarray(pts.reshape(-1, 3))
    out = _backend.interp_features(
        grid.index_vol, grid.sorted_keys, grid.perm, grid.features,
        grid.resolution, pts,
    )
    return out[0] if single else out


def _prepare_rays(srf, rays):
    """World-space rays to grid space plus entry/exit distances.

    The grid occupies [0, H-1]^3; the world-to-grid scale is isotropic so
    unit world directions stay unit in grid space and distances scale by
    (H-1)/2.
    """
    h = srf.resolution
    scale = (h - 1) / 2.0
    origins = np.ascontiguousarray(world_to_grid(rays.origins, h))
    dirs = np.ascontiguousarray(np.asarray(rays.directions, dtype=np.float64))
    near = rays.near * scale
    far = rays.far * scale
    lo, hi = 0.0, float(h - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    par = dirs == 0.0
    if np.any(par):
        inside = (origins >= lo) & (origins <= hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    t0 = np.maximum(tmin.max(axis=1), near)
    t1 = np.minimum(tmax.min(axis=1), far)
    return origins, dirs, t0, t1


def render_rays(srf, rays, cfg=None, grid=None):
    """Render a ray bundle; returns per-ray RGB, alpha and transmittance."""
    cfg = cfg or RenderConfig()
    if grid is None:
        grid = GridIndex(srf)
    origins, dirs, t0, t1 = _prepare_rays(srf, rays)
    rgb, trans = _backend.render_forward(
        *grid.kernel_args(), origins, dirs, t0, t1,
        cfg.step_size, cfg.step_size * 2.0 / (srf.resolution - 1),
        _ACTIVATIONS[cfg.sigma_activation],
        np.asarray(cfg.background, dtype=np.float64), cfg.stop_threshold,
    )
    return RenderOutput(rgb=rgb, alpha=1.0 - trans, transmittance=trans)


def render_backward(srf, rays, cfg, d_rgb, grid=None):
    """Analytic gradients of composited pixels w.r.t. voxel features.

    `d_rgb` is the upstream per-pixel RGB gradient; voxels never touched by
    any ray keep zero gradient.
    """
    cfg = cfg or RenderConfig()
    d_rgb = np.ascontiguousarray(d_rgb, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(d_rgb)):
        raise ContractError("d_rgb must be finite")
    if grid is None:
        grid = GridIndex(srf)
    origins, dirs, t0, t1 = _prepare_rays(srf, rays)
    gd, grad = _backend.render_backward(
        *grid.kernel_args(), origins, dirs, t0, t1,
        cfg.step_size, cfg.step_size * 2.0 / (srf.resolution - 1),
        _ACTIVATIONS[cfg.sigma_activation],
        np.asarray(cfg.background, dtype=np.float64), cfg.stop_threshold,
        d_rgb,
    )
    return RenderGradients(d_density=gd, d_radiance=grad)


def max_composite_weights(srf, rays, cfg=None, grid=None):
    """Per-voxel maximum composite weight over all samples of all rays."""
    cfg = cfg or RenderConfig()
    if grid is None:
        grid = GridIndex(srf)
    origins, dirs, t0, t1 = _prepare_rays(srf, rays)
    return _backend.voxel_max_weight(
        *grid.kernel_args(), origins, dirs, t0, t1,
        cfg.step_size, cfg.step_size * 2.0 / (srf.resolution - 1),
        _ACTIVATIONS[cfg.sigma_activation],
        np.asarray(cfg.background, dtype=np.float64), cfg.stop_threshold,
    )


def render_image(srf, view, cfg=None, grid=None):
    """Render a full camera view into an RGBA image buffer (row-major)."""
    from ..scenes import ImageBuffer
    from ..cameras import generate_rays

    cfg = cfg or RenderConfig()
    rays = generate_rays(view)
    out = render_rays(srf, rays, cfg, grid=grid)
    w, h = view.intrinsics.width, view.intrinsics.height
    rgba = np.empty((h, w, 4), dtype=np.float32)
    rgba[..., :3] = out.rgb.reshape(h, w, 3)
    rgba[..., 3] = out.alpha.reshape(h, w)
    return ImageBuffer(width=w, height=h, rgba=np.clip(rgba, 0.0, 1.0))
