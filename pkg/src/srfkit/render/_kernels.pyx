# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled render kernels.

Must stay semantically identical to _kernels_py.py: same sample placement,
corner order, accumulation order, clamping and termination rules. The
Python module is the readable reference; this one is the fast path.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()

cdef double SH_C0 = 0.28209479
cdef double SH_C1 = 0.48860251

BACKEND_NAME = "compiled"


cdef inline long _find_row(const int[::1] index_vol, const cnp.int64_t[::1] keys,
                           const int[::1] perm, long h, long ci, long cj, long ck) noexcept nogil:
    """Voxel row for integer coords, -1 when absent. Bounds already checked."""
    cdef cnp.int64_t lin = (<cnp.int64_t>ci * h + cj) * h + ck
    cdef long lo, hi, mid
    if index_vol.shape[0] > 0:
        return index_vol[lin]
    lo = 0
    hi = keys.shape[0]
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < lin:
            lo = mid + 1
        else:
            hi = mid
    if lo < keys.shape[0] and keys[lo] == lin:
        return perm[lo]
    return -1


cdef inline void _interp_point(const int[::1] index_vol, const cnp.int64_t[::1] keys,
                               const int[::1] perm, const double[:, ::1] features,
                               long h, long width,
                               double px, double py, double pz,
                               double* acc) noexcept nogil:
    """Trilinear blend of the 8 surrounding voxel features into acc[width].

    Corner order is binary (di, dj, dk) counting, matching the fallback.
    """
    cdef long bi = <long>floor(px)
    cdef long bj = <long>floor(py)
    cdef long bk = <long>floor(pz)
    cdef double fx = px - bi
    cdef double fy = py - bj
    cdef double fz = pz - bk
    cdef long di, dj, dk, ci, cj, ck, row, q
    cdef double w
    for q in range(width):
        acc[q] = 0.0
    for di in range(2):
        for dj in range(2):
            for dk in range(2):
                ci = bi + di
                cj = bj + dj
                ck = bk + dk
                if ci < 0 or ci >= h or cj < 0 or cj >= h or ck < 0 or ck >= h:
                    continue
                row = _find_row(index_vol, keys, perm, h, ci, cj, ck)
                if row < 0:
                    continue
                w = (fx if di else 1.0 - fx) * (fy if dj else 1.0 - fy) \
                    * (fz if dk else 1.0 - fz)
                for q in range(width):
                    acc[q] += w * features[row, q]


cdef inline void _sh_color(const double* feat, long d,
                           double dx, double dy, double dz,
                           double* lin, double* col) noexcept nogil:
    """lin: raw linear color; col: clamped to [0, 1]."""
    cdef long ch
    cdef double v
    for ch in range(3):
        if d == 3:
            v = feat[1 + ch]
        else:
            v = SH_C0 * feat[1 + 4 * ch] + SH_C1 * (
                (feat[2 + 4 * ch] * dy + feat[3 + 4 * ch] * dz)
                + feat[4 + 4 * ch] * dx)
        lin[ch] = v
        if v < 0.0:
            v = 0.0
        elif v > 1.0:
            v = 1.0
        col[ch] = v


def render_forward(index_vol, keys, perm, features, h, d,
                   origins, dirs, t0, t1, step, step_world, activation,
                   background, stop_threshold):
    cdef const int[::1] iv = index_vol
    cdef const cnp.int64_t[::1] kv = keys
    cdef const int[::1] pv = perm
    cdef const double[:, ::1] feats = features
    cdef const double[:, ::1] o = origins
    cdef const double[:, ::1] dr = dirs
    cdef const double[::1] ta = t0
    cdef const double[::1] tb = t1
    cdef double dt = step
    cdef double dtw = step_world
    cdef int act = activation
    cdef double stop = stop_threshold
    cdef long hh = h
    cdef long dd = d
    cdef long width = 1 + dd
    cdef long n = o.shape[0]

    out_rgb = np.zeros((n, 3), dtype=np.float64)
    out_trans = np.ones(n, dtype=np.float64)
    cdef double[:, ::1] rgb = out_rgb
    cdef double[::1] trans = out_trans
    cdef double bg0 = background[0], bg1 = background[1], bg2 = background[2]

    cdef long r, k, count, ch
    cdef double t, px, py, pz, sigma, a, w, trn
    cdef double feat[13]
    cdef double lin[3]
    cdef double col[3]
    with nogil:
        for r in range(n):
            trn = 1.0
            count = <long>((tb[r] - ta[r]) / dt) if tb[r] > ta[r] else 0
            for k in range(count):
                t = ta[r] + (k + 0.5) * dt
                px = o[r, 0] + t * dr[r, 0]
                py = o[r, 1] + t * dr[r, 1]
                pz = o[r, 2] + t * dr[r, 2]
                _interp_point(iv, kv, pv, feats, hh, width, px, py, pz, feat)
                if act == 0:
                    sigma = feat[0] if feat[0] > 0.0 else 0.0
                else:
                    sigma = exp(feat[0])
                a = 1.0 - exp(-sigma * dtw)
                w = trn * a
                _sh_color(feat, dd, dr[r, 0], dr[r, 1], dr[r, 2], lin, col)
                for ch in range(3):
                    rgb[r, ch] += w * col[ch]
                trn = trn * (1.0 - a)
                if trn < stop:
                    break
            rgb[r, 0] += trn * bg0
            rgb[r, 1] += trn * bg1
            rgb[r, 2] += trn * bg2
            trans[r] = trn
    return out_rgb, out_trans


def render_backward(index_vol, keys, perm, features, h, d,
                    origins, dirs, t0, t1, step, step_world, activation,
                    background, stop_threshold, d_rgb):
    cdef const int[::1] iv = index_vol
    cdef const cnp.int64_t[::1] kv = keys
    cdef const int[::1] pv = perm
    cdef const double[:, ::1] feats = features
    cdef const double[:, ::1] o = origins
    cdef const double[:, ::1] dr = dirs
    cdef const double[::1] ta = t0
    cdef const double[::1] tb = t1
    cdef const double[:, ::1] grgb = d_rgb
    cdef double dt = step
    cdef double dtw = step_world
    cdef int act = activation
    cdef double stop = stop_threshold
    cdef long hh = h
    cdef long dd = d
    cdef long width = 1 + dd
    cdef long n = o.shape[0]
    cdef long m = feats.shape[0]

    out_dd = np.zeros(m, dtype=np.float64)
    out_dr = np.zeros((m, dd), dtype=np.float64)
    cdef double[::1] gd = out_dd
    cdef double[:, ::1] gr = out_dr

    cdef long max_k = 0
    cdef long r, k, count, ch, q
    for r in range(n):
        count = <long>((tb[r] - ta[r]) / dt) if tb[r] > ta[r] else 0
        if count > max_k:
            max_k = count
    if max_k == 0:
        return out_dd, out_dr

    scratch = np.zeros((max_k, 9), dtype=np.float64)  # dens, a, T, lin3, col3
    cdef double[:, ::1] st = scratch
    cdef double bg0 = background[0], bg1 = background[1], bg2 = background[2]

    cdef double t, px, py, pz, sigma, a, w, trn, used_f
    cdef double feat[13]
    cdef double lin[3]
    cdef double col[3]
    cdef double sfx[3]
    cdef double dcol[3]
    cdef double dlin[3]
    cdef double drad[12]
    cdef double d_a, d_sigma, d_dens, cw, fx, fy, fz
    cdef long used, bi, bj, bk, di, dj, dk, ci, cj, ck, row
    with nogil:
        for r in range(n):
            trn = 1.0
            used = 0
            count = <long>((tb[r] - ta[r]) / dt) if tb[r] > ta[r] else 0
            for k in range(count):
                t = ta[r] + (k + 0.5) * dt
                px = o[r, 0] + t * dr[r, 0]
                py = o[r, 1] + t * dr[r, 1]
                pz = o[r, 2] + t * dr[r, 2]
                _interp_point(iv, kv, pv, feats, hh, width, px, py, pz, feat)
                if act == 0:
                    sigma = feat[0] if feat[0] > 0.0 else 0.0
                else:
                    sigma = exp(feat[0])
                a = 1.0 - exp(-sigma * dtw)
                _sh_color(feat, dd, dr[r, 0], dr[r, 1], dr[r, 2], lin, col)
                st[k, 0] = feat[0]
                st[k, 1] = a
                st[k, 2] = trn
                for ch in range(3):
                    st[k, 3 + ch] = lin[ch]
                    st[k, 6 + ch] = col[ch]
                used = k + 1
                trn = trn * (1.0 - a)
                if trn < stop:
                    break
            # reverse sweep with transmittance-normalized suffix color
            sfx[0] = bg0
            sfx[1] = bg1
            sfx[2] = bg2
            for k in range(used - 1, -1, -1):
                a = st[k, 1]
                w = st[k, 2] * a
                d_a = 0.0
                for ch in range(3):
                    dcol[ch] = w * grgb[r, ch]
                    if 0.0 <= st[k, 3 + ch] <= 1.0:
                        dlin[ch] = dcol[ch]
                    else:
                        dlin[ch] = 0.0
                    d_a += grgb[r, ch] * (st[k, 6 + ch] - sfx[ch])
                d_a *= st[k, 2]
                d_sigma = d_a * dtw * (1.0 - a)
                if act == 0:
                    d_dens = d_sigma if st[k, 0] > 0.0 else 0.0
                else:
                    d_dens = d_sigma * exp(st[k, 0])
                if dd == 3:
                    for ch in range(3):
                        drad[ch] = dlin[ch]
                else:
                    for ch in range(3):
                        drad[4 * ch + 0] = SH_C0 * dlin[ch]
                        drad[4 * ch + 1] = SH_C1 * dr[r, 1] * dlin[ch]
                        drad[4 * ch + 2] = SH_C1 * dr[r, 2] * dlin[ch]
                        drad[4 * ch + 3] = SH_C1 * dr[r, 0] * dlin[ch]
                t = ta[r] + (k + 0.5) * dt
                px = o[r, 0] + t * dr[r, 0]
                py = o[r, 1] + t * dr[r, 1]
                pz = o[r, 2] + t * dr[r, 2]
                bi = <long>floor(px)
                bj = <long>floor(py)
                bk = <long>floor(pz)
                fx = px - bi
                fy = py - bj
                fz = pz - bk
                for di in range(2):
                    for dj in range(2):
                        for dk in range(2):
                            ci = bi + di
                            cj = bj + dj
                            ck = bk + dk
                            if ci < 0 or ci >= hh or cj < 0 or cj >= hh \
                                    or ck < 0 or ck >= hh:
                                continue
                            row = _find_row(iv, kv, pv, hh, ci, cj, ck)
                            if row < 0:
                                continue
                            cw = (fx if di else 1.0 - fx) \
                                * (fy if dj else 1.0 - fy) \
                                * (fz if dk else 1.0 - fz)
                            gd[row] += cw * d_dens
                            for q in range(dd):
                                gr[row, q] += cw * drad[q]
                for ch in range(3):
                    sfx[ch] = a * st[k, 6 + ch] + (1.0 - a) * sfx[ch]
    return out_dd, out_dr


def voxel_max_weight(index_vol, keys, perm, features, h, d,
                     origins, dirs, t0, t1, step, step_world, activation,
                     background, stop_threshold):
    cdef const int[::1] iv = index_vol
    cdef const cnp.int64_t[::1] kv = keys
    cdef const int[::1] pv = perm
    cdef const double[:, ::1] feats = features
    cdef const double[:, ::1] o = origins
    cdef const double[:, ::1] dr = dirs
    cdef const double[::1] ta = t0
    cdef const double[::1] tb = t1
    cdef double dt = step
    cdef double dtw = step_world
    cdef int act = activation
    cdef double stop = stop_threshold
    cdef long hh = h
    cdef long width = 1 + d
    cdef long n = o.shape[0]
    cdef long m = feats.shape[0]

    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] maxw = out
    cdef long r, k, count, bi, bj, bk, di, dj, dk, ci, cj, ck, row
    cdef double t, px, py, pz, sigma, a, w, trn, cw, fx, fy, fz, v
    cdef double feat[13]
    with nogil:
        for r in range(n):
            trn = 1.0
            count = <long>((tb[r] - ta[r]) / dt) if tb[r] > ta[r] else 0
            for k in range(count):
                t = ta[r] + (k + 0.5) * dt
                px = o[r, 0] + t * dr[r, 0]
                py = o[r, 1] + t * dr[r, 1]
                pz = o[r, 2] + t * dr[r, 2]
                _interp_point(iv, kv, pv, feats, hh, width, px, py, pz, feat)
                if act == 0:
                    sigma = feat[0] if feat[0] > 0.0 else 0.0
                else:
                    sigma = exp(feat[0])
                a = 1.0 - exp(-sigma * dtw)
                w = trn * a
                bi = <long>floor(px)
                bj = <long>floor(py)
                bk = <long>floor(pz)
                fx = px - bi
                fy = py - bj
                fz = pz - bk
                for di in range(2):
                    for dj in range(2):
                        for dk in range(2):
                            ci = bi + di
                            cj = bj + dj
                            ck = bk + dk
                            if ci < 0 or ci >= hh or cj < 0 or cj >= hh \
                                    or ck < 0 or ck >= hh:
                                continue
                            row = _find_row(iv, kv, pv, hh, ci, cj, ck)
                            if row < 0:
                                continue
                            cw = (fx if di else 1.0 - fx) \
                                * (fy if dj else 1.0 - fy) \
                                * (fz if dk else 1.0 - fz)
                            v = w * cw
                            if v > maxw[row]:
                                maxw[row] = v
                trn = trn * (1.0 - a)
                if trn < stop:
                    break
    return out


def interp_features(index_vol, keys, perm, features, h, pts):
    cdef const int[::1] iv = index_vol
    cdef const cnp.int64_t[::1] kv = keys
    cdef const int[::1] pv = perm
    cdef const double[:, ::1] feats = features
    cdef const double[:, ::1] p = pts
    cdef long hh = h
    cdef long width = feats.shape[1]
    cdef long n = p.shape[0]
    out = np.zeros((n, width), dtype=np.float64)
    cdef double[:, ::1] acc = out
    cdef double feat[13]
    cdef long r, q
    with nogil:
        for r in range(n):
            _interp_point(iv, kv, pv, feats, hh, width,
                          p[r, 0], p[r, 1], p[r, 2], feat)
            for q in range(width):
                acc[r, q] = feat[q]
    return out
