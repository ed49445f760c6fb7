"""Shared test utilities: an independent dense reference renderer and
finite-difference helpers with kink detection.

The dense renderer deliberately avoids the production code paths: it works
on the densified array with scalar python loops, implementing the same
quadrature definition from scratch. It is the oracle the sparse renderer is
checked against.
"""

import numpy as np

from srfkit.field import SparseRadianceField, densify

SH0 = 0.28209479
SH1 = 0.48860251


def make_random_field(rng, h, d, n, density_range=(0.5, 6.0), coeff_scale=0.4,
                      dtype=np.float32):
    lin = rng.choice(h**3, size=n, replace=False)
    coords = np.stack(np.unravel_index(lin, (h, h, h)), axis=1)
    feats = rng.normal(0.0, coeff_scale, size=(n, 1 + d))
    feats[:, 0] = rng.uniform(*density_range, size=n)
    return SparseRadianceField.from_arrays(h, d, coords, feats, dtype=dtype)


def dense_sample(dense, h, point):
    """Trilinear interpolation on the dense array; out-of-grid corners zero."""
    base = np.floor(point).astype(int)
    frac = point - np.floor(point)
    acc = np.zeros(dense.shape[3], dtype=np.float64)
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                q = base + np.array([a, b, c])
                if np.all(q >= 0) and np.all(q < h):
                    w = (
                        (frac[0] if a else 1.0 - frac[0])
                        * (frac[1] if b else 1.0 - frac[1])
                        * (frac[2] if c else 1.0 - frac[2])
                    )
                    acc += w * dense[q[0], q[1], q[2]].astype(np.float64)
    return acc


def _dense_sh_color(feat, d, direction):
    lin = np.empty(3)
    if d == 3:
        lin[:] = feat[1:4]
    else:
        x, y, z = direction
        for ch in range(3):
            a = feat[1 + 4 * ch : 5 + 4 * ch]
            lin[ch] = SH0 * a[0] + SH1 * (a[1] * y + a[2] * z + a[3] * x)
    return lin, np.clip(lin, 0.0, 1.0)


def dense_render(srf, rays, cfg, collect_samples=False):
    """Reference volume renderer over the densified field.

    Returns (rgb, transmittance[, samples]) where samples is the list of
    per-ray interpolated feature rows, for bit-level comparison.
    """
    h = srf.resolution
    d = srf.color_dim
    dense = densify(srf)
    scale = (h - 1) / 2.0
    n = len(rays)
    rgb_out = np.zeros((n, 3))
    trans_out = np.ones(n)
    all_samples = []
    act = cfg.sigma_activation
    bg = np.asarray(cfg.background, dtype=np.float64)
    for r in range(n):
        o = (np.asarray(rays.origins[r], dtype=np.float64) + 1.0) * scale
        dr = np.asarray(rays.directions[r], dtype=np.float64)
        t0, t1 = rays.near * scale, rays.far * scale
        ok = True
        for ax in range(3):
            if dr[ax] == 0.0:
                if not (0.0 <= o[ax] <= h - 1):
                    ok = False
                    break
            else:
                ta = (0.0 - o[ax]) / dr[ax]
                tb = ((h - 1) - o[ax]) / dr[ax]
                t0 = max(t0, min(ta, tb))
                t1 = min(t1, max(ta, tb))
        count = int((t1 - t0) / cfg.step_size) if (ok and t1 > t0) else 0
        step_world = cfg.step_size * 2.0 / (h - 1)
        trans = 1.0
        rgb = np.zeros(3)
        samples = []
        for k in range(count):
            t = t0 + (k + 0.5) * cfg.step_size
            feat = dense_sample(dense, h, o + t * dr)
            samples.append(feat)
            sigma = max(feat[0], 0.0) if act == "relu" else np.exp(feat[0])
            a = 1.0 - np.exp(-sigma * step_world)
            w = trans * a
            _, col = _dense_sh_color(feat, d, dr)
            rgb = rgb + w * col
            trans = trans * (1.0 - a)
            if trans < cfg.stop_threshold:
                break
        rgb = rgb + trans * bg
        rgb_out[r] = rgb
        trans_out[r] = trans
        all_samples.append(samples)
    if collect_samples:
        return rgb_out, trans_out, all_samples
    return rgb_out, trans_out


def fd_gradient_check(loss_fn, array, analytic, rng, h=1e-4, rel_tol=1e-3,
                      min_mag=1e-6, max_checks=None, kink_ratio=0.25):
    """Central finite differences against analytic gradients, skipping kinks.

    Elements where the forward and backward one-sided differences disagree
    by more than `kink_ratio` relative are nondifferentiable points (ReLU /
    clamp / L1 crossings within h) and are excluded. Returns
    (n_checked, n_failed, worst_rel, n_skipped).
    """
    ana = np.asarray(analytic).reshape(-1)
    idx = np.arange(array.size)
    if max_checks is not None and array.size > max_checks:
        idx = rng.choice(array.size, size=max_checks, replace=False)
    checked = failed = skipped = 0
    worst = 0.0
    for i in idx:
        if abs(ana[i]) <= min_mag:
            continue
        # multi-index assignment works on views (array may be a slice)
        mi = np.unravel_index(i, array.shape)
        orig = array[mi]
        array[mi] = orig + h
        lp = loss_fn()
        array[mi] = orig - h
        lm = loss_fn()
        array[mi] = orig
        l0 = loss_fn()
        fwd = (lp - l0) / h
        bwd = (l0 - lm) / h
        scale = max(abs(fwd), abs(bwd), 1e-12)
        if abs(fwd - bwd) > kink_ratio * scale:
            skipped += 1
            continue
        num = (lp - lm) / (2.0 * h)
        rel = abs(ana[i] - num) / abs(ana[i])
        worst = max(worst, rel)
        checked += 1
        if rel > rel_tol:
            failed += 1
    return checked, failed, worst, skipped
