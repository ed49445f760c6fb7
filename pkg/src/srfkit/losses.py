"""Training losses for partial-to-whole field generation.

Three terms: a binary cross-entropy on predicted density logits placed at
grid coordinates drawn from a quantized center Gaussian, a masked L1 on
radiance coefficients at solid ground-truth voxels, and an online rendering
L1 against foreground pixels of posed target images. The rendering term
deliberately does not touch densities: its gradient density block is zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .field import SparseRadianceField
from .render import RenderConfig, render_backward, render_rays
from .cameras import generate_rays

# Logit assigned to coordinates the predicted field does not occupy. Deep in
# the "confident empty" regime so absent voxels are cheap when the label is
# empty and expensive when it is solid; carries no gradient (nothing to move).
EMPTY_LOGIT = -10.0


@dataclass(frozen=True)
class QGaussianSpec:
    """Quantized isotropic Gaussian over grid coordinates.

    Per-axis distribution: normal with mean H/2 and variance H * sigma^2 / 2,
    rounded to integers and clamped inside the grid.
    """

    sigma: float = 0.444
    multiplier_k: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigurationError("sigma must be positive")
        if self.multiplier_k < 1:
            raise ConfigurationError("multiplier_k must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    lambda_alpha: float = 30.0
    lambda_rho: float = 1.0
    lambda_r: float = 1.0
    alpha_dense: float = 0.0

    def __post_init__(self):
        for name in ("lambda_alpha", "lambda_rho", "lambda_r", "alpha_dense"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")


@dataclass
class LossReport:
    l_alpha: float
    l_rho: float
    l_r: float
    total: float
    d_density: np.ndarray  # (M,) w.r.t. predicted density logits
    d_radiance: np.ndarray  # (M, d) w.r.t. predicted radiance


def q_gaussian_sample(h, spec, count, rng=None):
    """`count` integer grid coordinates from the quantized center Gaussian.

    Duplicates are allowed; every coordinate lands inside [0, H-1]^3.
    """
    if h < 2:
        raise ConfigurationError("grid resolution must be >= 2")
    if count < 1:
        raise ConfigurationError("need at least one sample")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    std = np.sqrt(h * spec.sigma**2 / 2.0)
    raw = rng.normal(loc=h / 2.0, scale=std, size=(count, 3))
    return np.clip(np.round(raw), 0, h - 1).astype(np.int64)


def uniform_sample(h, count, rng=None):
    """Ablation baseline: coordinates uniform over the whole grid."""
    if rng is None:
        rng = np.random.default_rng(0)
    return rng.integers(0, h, size=(count, 3), dtype=np.int64)


def _density_lookup(srf, coords):
    """(present mask, density values) of `srf` at integer coords (K, 3)."""
    h = np.int64(srf.resolution)
    keys = srf.packed_keys()
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    q = (coords[:, 0].astype(np.int64) * h + coords[:, 1]) * h + coords[:, 2]
    pos = np.searchsorted(sorted_keys, q)
    pos = np.minimum(pos, max(sorted_keys.size - 1, 0))
    if sorted_keys.size == 0:
        return np.zeros(len(q), dtype=bool), np.zeros(len(q)), np.zeros(len(q), int)
    present = sorted_keys[pos] == q
    rows = np.where(present, order[pos], 0)
    dens = np.where(present, srf.density.astype(np.float64)[rows], 0.0)
    return present, dens, rows


def density_loss(pred, gt, coords, alpha_dense=0.0):
    """Binary cross-entropy on predicted density logits at sampled coords.

    Labels: ground-truth density above alpha_dense (absent voxels count as
    empty). Predictions: sigmoid of the predicted density, absent predicted
    voxels contributing the fixed EMPTY_LOGIT with no gradient. Returns
    (mean BCE, gradient w.r.t. present predicted densities).
    """
    if pred.resolution != gt.resolution:
        raise ContractError("predicted and ground-truth resolutions differ")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    k = coords.shape[0]
    gt_present, gt_dens, _ = _density_lookup(gt, coords)
    labels = (gt_present & (gt_dens > alpha_dense)).astype(np.float64)
    pr_present, pr_dens, pr_rows = _density_lookup(pred, coords)
    logits = np.where(pr_present, pr_dens, EMPTY_LOGIT)
    # numerically stable BCE-with-logits
    per = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    value = float(per.mean())
    grad = np.zeros(pred.num_voxels, dtype=np.float64)
    if np.any(pr_present):
        sig = 1.0 / (1.0 + np.exp(-logits[pr_present]))
        np.add.at(grad, pr_rows[pr_present], (sig - labels[pr_present]) / k)
    return value, grad


def color_loss(pred, gt, alpha_dense=0.0):
    """Masked L1 on radiance at solid ground-truth voxels.

    Voxels with ground-truth density <= alpha_dense are excluded entirely;
    absent predicted voxels count as zero radiance (and get no gradient).
    Returns (mean per-voxel L1 distance, gradient w.r.t. predicted radiance).
    """
    if pred.color_dim != gt.color_dim:
        raise ContractError("radiance widths differ")
    if pred.resolution != gt.resolution:
        raise ContractError("resolutions differ")
    d = gt.color_dim
    mask = gt.density.astype(np.float64) > alpha_dense
    grad = np.zeros((pred.num_voxels, d), dtype=np.float64)
    n_masked = int(mask.sum())
    if n_masked == 0:
        return 0.0, grad
    coords = gt.coords[mask]
    gt_rad = gt.radiance[mask].astype(np.float64)
    pr_present, _, pr_rows = _density_lookup(pred, coords)
    pred_rad = np.zeros_like(gt_rad)
    pred_rad[pr_present] = pred.radiance.astype(np.float64)[pr_rows[pr_present]]
    diff = pred_rad - gt_rad
    value = float(np.abs(diff).sum() / n_masked)
    if np.any(pr_present):
        np.add.at(grad, pr_rows[pr_present], np.sign(diff[pr_present]) / n_masked)
    return value, grad


def perceptual_loss(pred, views, targets, cfg=None, color_scale=1.0,
                    density_scale=1.0):
    """Rendering L1 against foreground pixels of posed target images.

    The predicted field is rendered de-normalized: radiance times
    `color_scale` and density times `density_scale` (predictions live in
    normalized units; rendering them raw would be nearly transparent).
    Foreground = target alpha of exactly 1. Density receives no gradient
    from this term, so the density decode has no gradient consequences.
    Returns (value, d_density (all zeros), d_radiance).
    """
    if len(views) != len(targets):
        raise ContractError("need one target image per view")
    cfg = cfg or RenderConfig()
    render_field = pred
    if color_scale != 1.0 or density_scale != 1.0:
        feats = pred.features.copy()
        feats[:, 0] *= feats.dtype.type(density_scale)
        feats[:, 1:] *= feats.dtype.type(color_scale)
        render_field = SparseRadianceField.from_arrays(
            pred.resolution, pred.color_dim, pred.coords, feats,
            validate=False, dtype=feats.dtype,
        )
    total_abs = 0.0
    total_count = 0
    d_radiance = np.zeros((pred.num_voxels, pred.color_dim), dtype=np.float64)
    pending = []
    for view, target in zip(views, targets):
        rays = generate_rays(view)
        out = render_rays(render_field, rays, cfg)
        t_rgb = target.rgb.reshape(-1, 3).astype(np.float64)
        fg = target.alpha.reshape(-1) >= 1.0
        diff = out.rgb - t_rgb
        total_abs += float(np.abs(diff[fg]).sum())
        total_count += int(fg.sum()) * 3
        sgn = np.zeros_like(diff)
        sgn[fg] = np.sign(diff[fg])
        pending.append((rays, sgn))
    if total_count == 0:
        return 0.0, np.zeros(pred.num_voxels), d_radiance
    for rays, sgn in pending:
        grads = render_backward(render_field, rays, cfg, sgn / total_count)
        d_radiance += grads.d_radiance
    d_radiance *= color_scale  # chain through the de-normalization
    value = total_abs / total_count
    return value, np.zeros(pred.num_voxels), d_radiance


def total_loss(
    pred,
    gt,
    views,
    targets,
    weights=None,
    qspec=None,
    input_coord_count=None,
    render_cfg=None,
    color_scale=1.0,
    density_scale=1.0,
    rng=None,
    sampling="qgaussian",
):
    """Weighted combination of the three loss terms with merged gradients.

    The density term is sampled at multiplier_k x input_coord_count
    coordinates; `input_coord_count` is the occupancy of the network input
    (defaults to the prediction's own occupancy when not given).
    `sampling` picks the placement: the center Gaussian, or the uniform
    ablation baseline.
    """
    weights = weights or LossWeights()
    qspec = qspec or QGaussianSpec()
    base = input_coord_count if input_coord_count is not None else pred.num_voxels
    count = max(1, qspec.multiplier_k * int(base))
    if sampling == "qgaussian":
        coords = q_gaussian_sample(pred.resolution, qspec, count, rng=rng)
    elif sampling == "uniform":
        coords = uniform_sample(pred.resolution, count, rng=rng)
    else:
        raise ContractError(f"unknown sampling strategy {sampling!r}")
    l_alpha, g_alpha = density_loss(pred, gt, coords, weights.alpha_dense)
    l_rho, g_rho = color_loss(pred, gt, weights.alpha_dense)
    l_r, _, g_r = perceptual_loss(
        pred, views, targets, render_cfg, color_scale, density_scale
    )
    total = (
        weights.lambda_alpha * l_alpha
        + weights.lambda_rho * l_rho
        + weights.lambda_r * l_r
    )
    d_density = weights.lambda_alpha * g_alpha
    d_radiance = weights.lambda_rho * g_rho + weights.lambda_r * g_r
    return LossReport(
        l_alpha=l_alpha,
        l_rho=l_rho,
        l_r=l_r,
        total=total,
        d_density=d_density,
        d_radiance=d_radiance,
    )
