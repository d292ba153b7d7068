# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: tile rasterization (forward/backward) and grid nearest neighbours.

Every tile is owned by exactly one thread and its pixels are processed in a
fixed order, so results do not depend on the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, sqrt
from libc.stdlib cimport malloc, free
from libc.stdint cimport int64_t, int32_t

cnp.import_array()


cdef inline void _tile_forward(
    int tx, int ty, int tile, int W, int H,
    const double[:, ::1] means2d, const double[:, ::1] conics, const double[::1] opac,
    const double[:, ::1] colors, const int64_t[::1] ranges, const int64_t[::1] gids,
    const double[::1] bg, double amax, double amin, double tmin, double pcut, int ntx,
    double[:, :, ::1] out_color, double[:, ::1] out_T, int32_t[:, ::1] out_n,
) noexcept nogil:
    cdef int t = ty * ntx + tx
    cdef int64_t start = ranges[t], stop = ranges[t + 1], k
    cdef int px, py, g, last
    cdef double T, cr, cg, cb, dx, dy, power, a, test_T
    for py in range(ty * tile, min(ty * tile + tile, H)):
        for px in range(tx * tile, min(tx * tile + tile, W)):
            T = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            last = 0
            for k in range(start, stop):
                g = <int>gids[k]
                dx = px + 0.5 - means2d[g, 0]
                dy = py + 0.5 - means2d[g, 1]
                power = 0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) + conics[g, 1] * dx * dy
                if power > pcut or power < 0.0:
                    continue
                a = opac[g] * exp(-power)
                if a > amax:
                    a = amax
                if a < amin:
                    continue
                test_T = T * (1.0 - a)
                if test_T < tmin:
                    break
                cr = cr + colors[g, 0] * a * T
                cg = cg + colors[g, 1] * a * T
                cb = cb + colors[g, 2] * a * T
                T = test_T
                last = <int>(k - start + 1)
            out_color[py, px, 0] = cr + T * bg[0]
            out_color[py, px, 1] = cg + T * bg[1]
            out_color[py, px, 2] = cb + T * bg[2]
            out_T[py, px] = T
            out_n[py, px] = last


def rasterize_forward(
    const double[:, ::1] means2d, const double[:, ::1] conics, const double[::1] opac,
    const double[:, ::1] colors, const int64_t[::1] ranges, const int64_t[::1] gids,
    const double[::1] bg, int W, int H, int tile,
    double amax, double amin, double tmin, double pcut, int nthreads,
):
    cdef int ntx = (W + tile - 1) // tile
    cdef int nty = (H + tile - 1) // tile
    color = np.empty((H, W, 3), dtype=np.float64)
    trans = np.empty((H, W), dtype=np.float64)
    n_used = np.empty((H, W), dtype=np.int32)
    cdef double[:, :, ::1] oc = color
    cdef double[:, ::1] oT = trans
    cdef int32_t[:, ::1] on = n_used
    cdef int t
    for t in prange(ntx * nty, nogil=True, schedule="dynamic", num_threads=nthreads):
        _tile_forward(t % ntx, t // ntx, tile, W, H, means2d, conics, opac, colors, ranges, gids,
                      bg, amax, amin, tmin, pcut, ntx, oc, oT, on)
    return color, trans, n_used


cdef inline void _tile_backward(
    int tx, int ty, int tile, int W, int H,
    const double[:, ::1] means2d, const double[:, ::1] conics, const double[::1] opac,
    const double[:, ::1] colors, const int64_t[::1] ranges, const int64_t[::1] gids,
    const double[::1] bg, double amax, double amin, double tmin, double pcut, int ntx,
    const double[:, ::1] T_final, const int32_t[:, ::1] n_used,
    const double[:, :, ::1] dL_dC, const double[:, ::1] dL_dA,
    double[:, ::1] gpair,
) noexcept nogil:
    cdef int t = ty * ntx + tx
    cdef int64_t start = ranges[t], stop = ranges[t + 1], k, kk
    cdef int n = <int>(stop - start)
    if n == 0:
        return
    # per-pixel replay buffers: list offset, alpha, transmittance before, gaussian value
    cdef int64_t* buf_k = <int64_t*>malloc(n * sizeof(int64_t))
    cdef double* buf_a = <double*>malloc(n * sizeof(double))
    cdef double* buf_T = <double*>malloc(n * sizeof(double))
    cdef double* buf_G = <double*>malloc(n * sizeof(double))
    cdef int px, py, g, m, i, used
    cdef double T, dx, dy, power, a, G, Tf, Sr, Sg, Sb, gr, gg, gb, ga, dL_da, inv, w
    for py in range(ty * tile, min(ty * tile + tile, H)):
        for px in range(tx * tile, min(tx * tile + tile, W)):
            used = n_used[py, px]
            T = 1.0
            m = 0
            for k in range(start, start + used):
                g = <int>gids[k]
                dx = px + 0.5 - means2d[g, 0]
                dy = py + 0.5 - means2d[g, 1]
                power = 0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) + conics[g, 1] * dx * dy
                if power > pcut or power < 0.0:
                    continue
                G = exp(-power)
                a = opac[g] * G
                if a > amax:
                    a = amax
                if a < amin:
                    continue
                buf_k[m] = k
                buf_a[m] = a
                buf_T[m] = T
                buf_G[m] = G
                m = m + 1
                T = T * (1.0 - a)
            Tf = T_final[py, px]
            gr = dL_dC[py, px, 0]
            gg = dL_dC[py, px, 1]
            gb = dL_dC[py, px, 2]
            ga = dL_dA[py, px]
            Sr = Tf * bg[0]
            Sg = Tf * bg[1]
            Sb = Tf * bg[2]
            for i in range(m - 1, -1, -1):
                kk = buf_k[i]
                g = <int>gids[kk]
                a = buf_a[i]
                T = buf_T[i]
                w = a * T
                gpair[kk, 4] += gr * w
                gpair[kk, 5] += gg * w
                gpair[kk, 6] += gb * w
                inv = 1.0 / (1.0 - a)
                dL_da = (gr * (colors[g, 0] * T - Sr * inv) + gg * (colors[g, 1] * T - Sg * inv)
                         + gb * (colors[g, 2] * T - Sb * inv) + ga * Tf * inv)
                Sr = Sr + colors[g, 0] * w
                Sg = Sg + colors[g, 1] * w
                Sb = Sb + colors[g, 2] * w
                G = buf_G[i]
                if opac[g] * G > amax:
                    continue
                dx = px + 0.5 - means2d[g, 0]
                dy = py + 0.5 - means2d[g, 1]
                gpair[kk, 0] += dL_da * G
                # d a / d power = -a
                gpair[kk, 1] += -dL_da * a * 0.5 * dx * dx
                gpair[kk, 2] += -dL_da * a * dx * dy
                gpair[kk, 3] += -dL_da * a * 0.5 * dy * dy
    free(buf_k)
    free(buf_a)
    free(buf_T)
    free(buf_G)


def rasterize_backward(
    const double[:, ::1] means2d, const double[:, ::1] conics, const double[::1] opac,
    const double[:, ::1] colors, const int64_t[::1] ranges, const int64_t[::1] gids,
    const double[::1] bg, int W, int H, int tile,
    double amax, double amin, double tmin, double pcut, int nthreads,
    const double[:, ::1] T_final, const int32_t[:, ::1] n_used,
    const double[:, :, ::1] dL_dC, const double[:, ::1] dL_dA,
):
    """Per-(tile, Gaussian) gradient rows: [opacity, conic a, b, c, color r, g, b]."""
    cdef int ntx = (W + tile - 1) // tile
    cdef int nty = (H + tile - 1) // tile
    gpair_arr = np.zeros((gids.shape[0], 7), dtype=np.float64)
    cdef double[:, ::1] gpair = gpair_arr
    cdef int t
    for t in prange(ntx * nty, nogil=True, schedule="dynamic", num_threads=nthreads):
        _tile_backward(t % ntx, t // ntx, tile, W, H, means2d, conics, opac, colors, ranges, gids,
                       bg, amax, amin, tmin, pcut, ntx, T_final, n_used, dL_dC, dL_dA, gpair)
    return gpair_arr


cdef inline int64_t _find(const int64_t[::1] keys, int64_t key) noexcept nogil:
    cdef int64_t lo = 0, hi = keys.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < keys.shape[0] and keys[lo] == key:
        return lo
    return -1


def grid_nearest(
    const double[:, ::1] pts, const int64_t[:, ::1] cell, const int64_t[::1] keys,
    const int64_t[::1] starts, const int64_t[::1] order, const int64_t[::1] dims,
    double cell_size, int nthreads,
):
    """Nearest other point for every point, searching Chebyshev rings of cells.

    ``keys``/``starts`` describe the occupied cells in sorted order and
    ``order`` lists point indices grouped by cell.
    """
    cdef Py_ssize_t n = pts.shape[0]
    best_d2_arr = np.full(n, np.inf)
    best_j_arr = np.full(n, -1, dtype=np.int64)
    cdef double[::1] best_d2 = best_d2_arr
    cdef int64_t[::1] best_j = best_j_arr
    cdef Py_ssize_t i
    cdef int64_t r, cx, cy, cz, ix, iy, iz, key, c, s, e, j, q, rmax
    cdef double dx, dy, dz, d2, bound
    rmax = dims[0]
    if dims[1] > rmax:
        rmax = dims[1]
    if dims[2] > rmax:
        rmax = dims[2]
    for i in prange(n, nogil=True, schedule="static", num_threads=nthreads):
        cx = cell[i, 0]
        cy = cell[i, 1]
        cz = cell[i, 2]
        r = 0
        while r <= rmax:
            for ix in range(cx - r, cx + r + 1):
                if ix < 0 or ix >= dims[0]:
                    continue
                for iy in range(cy - r, cy + r + 1):
                    if iy < 0 or iy >= dims[1]:
                        continue
                    for iz in range(cz - r, cz + r + 1):
                        if iz < 0 or iz >= dims[2]:
                            continue
                        # ring cells only
                        if (ix - cx != r and cx - ix != r and iy - cy != r and cy - iy != r
                                and iz - cz != r and cz - iz != r):
                            continue
                        key = (ix * dims[1] + iy) * dims[2] + iz
                        c = _find(keys, key)
                        if c < 0:
                            continue
                        s = starts[c]
                        e = starts[c + 1]
                        for q in range(s, e):
                            j = order[q]
                            if j == i:
                                continue
                            dx = pts[i, 0] - pts[j, 0]
                            dy = pts[i, 1] - pts[j, 1]
                            dz = pts[i, 2] - pts[j, 2]
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 < best_d2[i] or (d2 == best_d2[i] and j < best_j[i]):
                                best_d2[i] = d2
                                best_j[i] = j
            # unvisited points are farther than r cells; the margin absorbs floor() rounding
            bound = (r - 0.01) * cell_size
            if best_j[i] >= 0 and bound > 0 and best_d2[i] < bound * bound:
                break
            r = r + 1
    return np.sqrt(best_d2_arr), best_j_arr
