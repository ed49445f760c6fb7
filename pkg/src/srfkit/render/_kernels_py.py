"""Pure-NumPy render kernels. Fallback when the compiled core is missing.

Semantics must match srfkit/render/_kernels.pyx exactly: same sample
placement, same corner accumulation order, same clamping and termination
rules. The compiled module is only a faster version of this file.
"""

import numpy as np

SH_C0 = 0.28209479
SH_C1 = 0.48860251

# Corner visit order for trilinear accumulation: (di, dj, dk) binary count.
_CORNERS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]

BACKEND_NAME = "python"


def _lookup_rows(index_vol, keys, perm, h, ci, cj, ck, valid):
    """Row index per coordinate triple, -1 when absent or invalid."""
    rows = np.full(ci.shape, -1, dtype=np.int64)
    if not np.any(valid):
        return rows
    lin = ((ci.astype(np.int64) * h) + cj) * h + ck
    if index_vol is not None and index_vol.size:
        rows[valid] = index_vol[lin[valid]]
    else:
        pos = np.searchsorted(keys, lin[valid])
        pos = np.minimum(pos, keys.size - 1) if keys.size else pos
        hit = keys.size > 0
        if hit:
            found = keys[pos] == lin[valid]
            out = np.full(pos.shape, -1, dtype=np.int64)
            out[found] = perm[pos[found]]
            rows[valid] = out
    return rows


def _interp_features(index_vol, keys, perm, features, h, pts):
    """Trilinear feature interpolation at float grid points (N, 3).

    Absent voxels and out-of-grid corners contribute zeros. Accumulates
    corner by corner in fixed order.
    """
    n = pts.shape[0]
    width = features.shape[1]
    base = np.floor(pts)
    frac = pts - base
    base = base.astype(np.int64)
    acc = np.zeros((n, width), dtype=np.float64)
    for di, dj, dk in _CORNERS:
        ci = base[:, 0] + di
        cj = base[:, 1] + dj
        ck = base[:, 2] + dk
        valid = (
            (ci >= 0) & (ci < h) & (cj >= 0) & (cj < h) & (ck >= 0) & (ck < h)
        )
        rows = _lookup_rows(index_vol, keys, perm, h, ci, cj, ck, valid)
        wx = frac[:, 0] if di else 1.0 - frac[:, 0]
        wy = frac[:, 1] if dj else 1.0 - frac[:, 1]
        wz = frac[:, 2] if dk else 1.0 - frac[:, 2]
        w = wx * wy * wz
        present = rows >= 0
        if np.any(present):
            acc[present] += w[present, None] * features[rows[present]]
    return acc


def _corner_weights_rows(index_vol, keys, perm, h, pts):
    """Per-corner (rows, weights) lists for backward scatter."""
    base = np.floor(pts)
    frac = pts - base
    base = base.astype(np.int64)
    out = []
    for di, dj, dk in _CORNERS:
        ci = base[:, 0] + di
        cj = base[:, 1] + dj
        ck = base[:, 2] + dk
        valid = (
            (ci >= 0) & (ci < h) & (cj >= 0) & (cj < h) & (ck >= 0) & (ck < h)
        )
        rows = _lookup_rows(index_vol, keys, perm, h, ci, cj, ck, valid)
        wx = frac[:, 0] if di else 1.0 - frac[:, 0]
        wy = frac[:, 1] if dj else 1.0 - frac[:, 1]
        wz = frac[:, 2] if dk else 1.0 - frac[:, 2]
        out.append((rows, wx * wy * wz))
    return out


def _sh_colors(radiance, dirs, d):
    """Clamped RGB from interpolated radiance coefficients.

    d=3: coefficients are RGB directly. d=12: channel-major degree-0/1
    harmonics evaluated along the (unit) ray direction.
    """
    if d == 3:
        lin = radiance.copy()
    else:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        lin = np.empty((radiance.shape[0], 3), dtype=np.float64)
        for ch in range(3):
            a = radiance[:, 4 * ch : 4 * ch + 4]
            lin[:, ch] = SH_C0 * a[:, 0] + SH_C1 * (
                a[:, 1] * y + a[:, 2] * z + a[:, 3] * x
            )
    return lin, np.clip(lin, 0.0, 1.0)


def render_forward(
    index_vol, keys, perm, features, h, d,
    origins, dirs, t0, t1, step, step_world, activation, background,
    stop_threshold,
):
    """March all rays; returns (rgb (N,3), transmittance (N,)).

    `step` is the marching stride in grid units; `step_world` is the same
    stride in world units and is what scales the optical depth, keeping
    density values resolution-independent.
    """
    n = origins.shape[0]
    counts = np.where(t1 > t0, ((t1 - t0) / step).astype(np.int64), 0)
    max_k = int(counts.max()) if n else 0
    rgb = np.zeros((n, 3), dtype=np.float64)
    trans = np.ones(n, dtype=np.float64)
    alive = counts > 0
    for k in range(max_k):
        alive = alive & (k < counts)
        if not np.any(alive):
            break
        idx = np.nonzero(alive)[0]
        t = t0[idx] + (k + 0.5) * step
        pts = origins[idx] + t[:, None] * dirs[idx]
        feat = _interp_features(index_vol, keys, perm, features, h, pts)
        dens = feat[:, 0]
        if activation == 0:
            sigma = np.maximum(dens, 0.0)
        else:
            sigma = np.exp(dens)
        a = 1.0 - np.exp(-sigma * step_world)
        w = trans[idx] * a
        _, colors = _sh_colors(feat[:, 1:], dirs[idx], d)
        rgb[idx] += w[:, None] * colors
        trans[idx] = trans[idx] * (1.0 - a)
        dead = trans[idx] < stop_threshold
        if np.any(dead):
            sub = alive[idx].copy()
            sub[dead] = False
            alive[idx] = sub
    rgb += trans[:, None] * np.asarray(background, dtype=np.float64)
    return rgb, trans


def render_backward(
    index_vol, keys, perm, features, h, d,
    origins, dirs, t0, t1, step, step_world, activation, background,
    stop_threshold, d_rgb,
):
    """Reverse pass of render_forward; returns (d_density (M,), d_radiance (M,d)).

    Replays the march storing per-sample state, then sweeps each ray back
    to front keeping the transmittance-normalized suffix color, which avoids
    dividing by (1 - alpha) for near-opaque samples.
    """
    n = origins.shape[0]
    m = features.shape[0]
    counts = np.where(t1 > t0, ((t1 - t0) / step).astype(np.int64), 0)
    max_k = int(counts.max()) if n else 0
    d_density = np.zeros(m, dtype=np.float64)
    d_radiance = np.zeros((m, d), dtype=np.float64)
    if max_k == 0:
        return d_density, d_radiance

    trans = np.ones(n, dtype=np.float64)
    used = np.zeros(n, dtype=np.int64)
    dens_s = np.zeros((n, max_k), dtype=np.float64)
    a_s = np.zeros((n, max_k), dtype=np.float64)
    t_s = np.zeros((n, max_k), dtype=np.float64)
    lin_s = np.zeros((n, max_k, 3), dtype=np.float64)
    col_s = np.zeros((n, max_k, 3), dtype=np.float64)
    alive = counts > 0
    for k in range(max_k):
        alive = alive & (k < counts)
        if not np.any(alive):
            break
        idx = np.nonzero(alive)[0]
        t = t0[idx] + (k + 0.5) * step
        pts = origins[idx] + t[:, None] * dirs[idx]
        feat = _interp_features(index_vol, keys, perm, features, h, pts)
        dens = feat[:, 0]
        sigma = np.maximum(dens, 0.0) if activation == 0 else np.exp(dens)
        a = 1.0 - np.exp(-sigma * step_world)
        lin, colors = _sh_colors(feat[:, 1:], dirs[idx], d)
        dens_s[idx, k] = dens
        a_s[idx, k] = a
        t_s[idx, k] = trans[idx]
        lin_s[idx, k] = lin
        col_s[idx, k] = colors
        used[idx] = k + 1
        trans[idx] = trans[idx] * (1.0 - a)
        dead = trans[idx] < stop_threshold
        if np.any(dead):
            sub = alive[idx].copy()
            sub[dead] = False
            alive[idx] = sub

    bg = np.asarray(background, dtype=np.float64)
    suffix = np.broadcast_to(bg, (n, 3)).copy()
    for k in range(max_k - 1, -1, -1):
        idx = np.nonzero(used > k)[0]
        if idx.size == 0:
            continue
        a = a_s[idx, k]
        tk = t_s[idx, k]
        colors = col_s[idx, k]
        lin = lin_s[idx, k]
        w = tk * a
        d_col = w[:, None] * d_rgb[idx]
        d_lin = np.where((lin >= 0.0) & (lin <= 1.0), d_col, 0.0)
        d_a = tk * np.sum(d_rgb[idx] * (colors - suffix[idx]), axis=1)
        d_sigma = d_a * step_world * (1.0 - a)
        dens = dens_s[idx, k]
        if activation == 0:
            d_dens = np.where(dens > 0.0, d_sigma, 0.0)
        else:
            d_dens = d_sigma * np.exp(dens)
        # chain d_lin into radiance-coefficient gradients
        if d == 3:
            d_rad = d_lin
        else:
            x, y, z = dirs[idx, 0], dirs[idx, 1], dirs[idx, 2]
            d_rad = np.zeros((idx.size, 12), dtype=np.float64)
            for ch in range(3):
                d_rad[:, 4 * ch + 0] = SH_C0 * d_lin[:, ch]
                d_rad[:, 4 * ch + 1] = SH_C1 * y * d_lin[:, ch]
                d_rad[:, 4 * ch + 2] = SH_C1 * z * d_lin[:, ch]
                d_rad[:, 4 * ch + 3] = SH_C1 * x * d_lin[:, ch]
        t = t0[idx] + (k + 0.5) * step
        pts = origins[idx] + t[:, None] * dirs[idx]
        for rows, cw in _corner_weights_rows(index_vol, keys, perm, h, pts):
            present = rows >= 0
            if np.any(present):
                r = rows[present]
                np.add.at(d_density, r, cw[present] * d_dens[present])
                np.add.at(
                    d_radiance, r, cw[present, None] * d_rad[present]
                )
        suffix[idx] = a[:, None] * colors + (1.0 - a[:, None]) * suffix[idx]
    return d_density, d_radiance


def voxel_max_weight(
    index_vol, keys, perm, features, h, d,
    origins, dirs, t0, t1, step, step_world, activation, background,
    stop_threshold,
):
    """Max over all samples of (composite weight x trilinear corner weight)
    per voxel. Used by pruning to find voxels that never matter visually."""
    n = origins.shape[0]
    m = features.shape[0]
    counts = np.where(t1 > t0, ((t1 - t0) / step).astype(np.int64), 0)
    max_k = int(counts.max()) if n else 0
    maxw = np.zeros(m, dtype=np.float64)
    trans = np.ones(n, dtype=np.float64)
    alive = counts > 0
    for k in range(max_k):
        alive = alive & (k < counts)
        if not np.any(alive):
            break
        idx = np.nonzero(alive)[0]
        t = t0[idx] + (k + 0.5) * step
        pts = origins[idx] + t[:, None] * dirs[idx]
        feat = _interp_features(index_vol, keys, perm, features, h, pts)
        dens = feat[:, 0]
        sigma = np.maximum(dens, 0.0) if activation == 0 else np.exp(dens)
        a = 1.0 - np.exp(-sigma * step_world)
        w = trans[idx] * a
        for rows, cw in _corner_weights_rows(index_vol, keys, perm, h, pts):
            present = rows >= 0
            if np.any(present):
                r = rows[present]
                np.maximum.at(maxw, r, w[present] * cw[present])
        trans[idx] = trans[idx] * (1.0 - a)
        dead = trans[idx] < stop_threshold
        if np.any(dead):
            sub = alive[idx].copy()
            sub[dead] = False
            alive[idx] = sub
    return maxw


def interp_features(index_vol, keys, perm, features, h, pts):
    """Public trilinear sampling entry point (same math as the march)."""
    return _interp_features(index_vol, keys, perm, features, h, pts)
