"""Pure numpy versions of the compiled kernels in ``_core.pyx``.

Same signatures and arithmetic; each tile is vectorized over its pixels and
walks its depth-sorted list sequentially. ``nthreads`` is accepted and ignored.
"""

import math

import numpy as np

_libm_exp = np.frompyfunc(math.exp, 1, 1)


def _exp_neg(power, pcut):
    """exp(-power) via libm (as the compiled kernel calls it) where 0 <= power <= pcut, else 0.

    numpy's vectorized exp can differ from libm in the last bit.
    """
    out = np.zeros(power.shape)
    ok = (power <= pcut) & (power >= 0.0)
    if ok.any():
        out[ok] = _libm_exp(-power[ok]).astype(np.float64)
    return out


def _tile_pixels(t, ntx, tile, W, H):
    tx, ty = t % ntx, t // ntx
    xs = np.arange(tx * tile, min(tx * tile + tile, W))
    ys = np.arange(ty * tile, min(ty * tile + tile, H))
    px, py = np.meshgrid(xs, ys)
    return px.ravel(), py.ravel()


def _eval(g, px, py, means2d, conics):
    dx = px + 0.5 - means2d[g, 0]
    dy = py + 0.5 - means2d[g, 1]
    power = 0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) + conics[g, 1] * dx * dy
    return dx, dy, power


def rasterize_forward(means2d, conics, opac, colors, ranges, gids, bg, W, H, tile,
                      amax, amin, tmin, pcut, nthreads=1):
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    color = np.empty((H, W, 3))
    trans = np.empty((H, W))
    n_used = np.empty((H, W), dtype=np.int32)
    for t in range(ntx * nty):
        px, py = _tile_pixels(t, ntx, tile, W, H)
        T = np.ones(len(px))
        C = np.zeros((len(px), 3))
        last = np.zeros(len(px), dtype=np.int32)
        live = np.ones(len(px), dtype=bool)
        start, stop = ranges[t], ranges[t + 1]
        for k in range(start, stop):
            if not live.any():
                break
            g = gids[k]
            _, _, power = _eval(g, px, py, means2d, conics)
            a = np.minimum(opac[g] * _exp_neg(power, pcut), amax)
            hit = live & (power <= pcut) & (power >= 0.0) & (a >= amin)
            test_T = T * (1.0 - a)
            stop_here = hit & (test_T < tmin)
            live &= ~stop_here
            hit &= ~stop_here
            C[hit] += colors[g][None, :] * a[hit][:, None] * T[hit][:, None]
            T[hit] = test_T[hit]
            last[hit] = k - start + 1
        color[py, px] = C + T[:, None] * bg[None, :]
        trans[py, px] = T
        n_used[py, px] = last
    return color, trans, n_used


def _fold(x):
    """Left-to-right sum over pixels, the order the compiled loop accumulates in."""
    return np.cumsum(x, axis=0)[-1] if len(x) else 0.0


def rasterize_backward(means2d, conics, opac, colors, ranges, gids, bg, W, H, tile,
                       amax, amin, tmin, pcut, nthreads, T_final, n_used, dL_dC, dL_dA):
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    gpair = np.zeros((len(gids), 7))
    for t in range(ntx * nty):
        start, stop = ranges[t], ranges[t + 1]
        if stop == start:
            continue
        px, py = _tile_pixels(t, ntx, tile, W, H)
        used = n_used[py, px]
        T = np.ones(len(px))
        replay = []
        for k in range(start, stop):
            in_range = (k - start) < used
            if not in_range.any():
                break
            g = gids[k]
            dx, dy, power = _eval(g, px, py, means2d, conics)
            G = _exp_neg(power, pcut)
            a = np.minimum(opac[g] * G, amax)
            hit = in_range & (power <= pcut) & (power >= 0.0) & (a >= amin)
            replay.append((k, g, hit, a, T.copy(), G, dx, dy))
            T = np.where(hit, T * (1.0 - a), T)
        Tf = T_final[py, px]
        gC = dL_dC[py, px]
        gA = dL_dA[py, px]
        S = Tf[:, None] * bg[None, :]
        for k, g, hit, a, Tb, G, dx, dy in reversed(replay):
            if not hit.any():
                continue
            a, Tb, G, dx, dy = a[hit], Tb[hit], G[hit], dx[hit], dy[hit]
            gc, ga, tf, Sh = gC[hit], gA[hit], Tf[hit], S[hit]
            w = a * Tb
            gpair[k, 4:7] += _fold(gc * w[:, None])
            inv = 1.0 / (1.0 - a)
            c = colors[g]
            dL_da = (gc[:, 0] * (c[0] * Tb - Sh[:, 0] * inv) + gc[:, 1] * (c[1] * Tb - Sh[:, 1] * inv)
                     + gc[:, 2] * (c[2] * Tb - Sh[:, 2] * inv) + ga * tf * inv)
            S[hit] = Sh + c[None, :] * w[:, None]
            free = opac[g] * G <= amax
            d, af, dxf, dyf = dL_da[free], a[free], dx[free], dy[free]
            gpair[k, 0] += _fold(d * G[free])
            gpair[k, 1] += _fold(-d * af * 0.5 * dxf * dxf)
            gpair[k, 2] += _fold(-d * af * dxf * dyf)
            gpair[k, 3] += _fold(-d * af * 0.5 * dyf * dyf)
    return gpair


def grid_nearest(pts, cell, keys, starts, order, dims, cell_size, nthreads=1):
    n = len(pts)
    best_d2 = np.full(n, np.inf)
    best_j = np.full(n, -1, dtype=np.int64)
    lookup = {int(k): c for c, k in enumerate(keys)}
    rmax = int(max(dims))
    P = pts.tolist()
    for i in range(n):
        cx, cy, cz = (int(v) for v in cell[i])
        xi, yi, zi = P[i]
        bd, bj = np.inf, -1
        for r in range(rmax + 1):
            for ix in range(cx - r, cx + r + 1):
                if not 0 <= ix < dims[0]:
                    continue
                for iy in range(cy - r, cy + r + 1):
                    if not 0 <= iy < dims[1]:
                        continue
                    for iz in range(cz - r, cz + r + 1):
                        if not 0 <= iz < dims[2]:
                            continue
                        if max(abs(ix - cx), abs(iy - cy), abs(iz - cz)) != r:
                            continue
                        c = lookup.get((ix * int(dims[1]) + iy) * int(dims[2]) + iz)
                        if c is None:
                            continue
                        for q in range(starts[c], starts[c + 1]):
                            j = int(order[q])
                            if j == i:
                                continue
                            dx, dy, dz = xi - P[j][0], yi - P[j][1], zi - P[j][2]
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 < bd or (d2 == bd and j < bj):
                                bd, bj = d2, j
            bound = (r - 0.01) * cell_size
            if bj >= 0 and bound > 0 and bd < bound * bound:
                break
        best_d2[i], best_j[i] = bd, bj
    return np.sqrt(best_d2), best_j
