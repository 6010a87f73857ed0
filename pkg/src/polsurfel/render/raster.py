"""Tile-based front-to-back compositing of projected surfels, with its adjoint.

Each pixel blends, in depth order, a per-surfel feature vector
``f_i = (colour, 1, depth_i(u), normal)`` with weights ``w_i = T_i alpha_i``.
Depth and normal are divided by the accumulated opacity afterwards.
"""
from __future__ import annotations

import numba as nb
import numpy as np

TILE = 8
T_MIN = 1e-4
ALPHA_EPS = 1e-8
# per-surfel linearized depth is floored here so blended depth stays positive
DEPTH_FLOOR = 0.01


@nb.njit(cache=True)
def _bin_tiles(order, u, ext, width, height, tile):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, np.int64)
    rects = np.empty((len(order), 4), np.int64)
    for k in range(len(order)):
        i = order[k]
        x0 = max(0, int(np.floor((u[i, 0] - ext[i, 0]) / tile)))
        x1 = min(tiles_x, int(np.floor((u[i, 0] + ext[i, 0]) / tile)) + 1)
        y0 = max(0, int(np.floor((u[i, 1] - ext[i, 1]) / tile)))
        y1 = min(tiles_y, int(np.floor((u[i, 1] + ext[i, 1]) / tile)) + 1)
        rects[k, 0] = x0
        rects[k, 1] = x1
        rects[k, 2] = y0
        rects[k, 3] = y1
        for ty in range(y0, y1):
            for tx in range(x0, x1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], np.int64)
    for k in range(len(order)):
        i = order[k]
        for ty in range(rects[k, 2], rects[k, 3]):
            for tx in range(rects[k, 0], rects[k, 1]):
                t = ty * tiles_x + tx
                lists[fill[t]] = i
                fill[t] += 1
    return offsets, lists


@nb.njit(cache=True, fastmath=True)
def _forward(offsets, lists, pk, u, color, depth, dgrad, normal,
             width, height, tile, power_min, t_min):
    tiles_x = (width + tile - 1) // tile
    out_c = np.zeros((height, width, 3))
    out_a = np.zeros((height, width))
    out_d = np.zeros((height, width))
    out_n = np.zeros((height, width, 3))
    last = np.zeros((height, width), np.int64)
    n_tiles = len(offsets) - 1
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        stop = offsets[t + 1]
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dsum = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                end = start
                for k in range(start, stop):
                    dx = px - pk[k, 0]
                    dy = py - pk[k, 1]
                    power = -0.5 * (pk[k, 2] * dx * dx + 2.0 * pk[k, 3] * dx * dy
                                    + pk[k, 4] * dy * dy)
                    if power < power_min or power > 0.0:
                        continue
                    i = lists[k]
                    alpha = pk[k, 5] * np.exp(power)
                    w = alpha * T
                    c0 += w * color[i, 0]
                    c1 += w * color[i, 1]
                    c2 += w * color[i, 2]
                    dsum += w * max(depth[i] + dgrad[i, 0] * dx + dgrad[i, 1] * dy, DEPTH_FLOOR)
                    n0 += w * normal[i, 0]
                    n1 += w * normal[i, 1]
                    n2 += w * normal[i, 2]
                    T *= 1.0 - alpha
                    end = k + 1
                    if T < t_min:
                        break
                a = 1.0 - T
                out_c[py, px, 0] = c0
                out_c[py, px, 1] = c1
                out_c[py, px, 2] = c2
                out_a[py, px] = a
                if a > ALPHA_EPS:
                    out_d[py, px] = dsum / a
                    out_n[py, px, 0] = n0 / a
                    out_n[py, px, 1] = n1 / a
                    out_n[py, px, 2] = n2 / a
                last[py, px] = end
    return out_c, out_a, out_d, out_n, last


@nb.njit(cache=True, fastmath=True)
def _backward(offsets, lists, pk, u, color, depth, dgrad, normal,
              width, height, tile, power_min,
              out_a, out_d, out_n, last, g_c, g_a, g_d, g_n):
    n = len(depth)
    d_u = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_color = np.zeros((n, 3))
    d_depth = np.zeros(n)
    d_dgrad = np.zeros((n, 2))
    d_normal = np.zeros((n, 3))
    tiles_x = (width + tile - 1) // tile
    n_tiles = len(offsets) - 1
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        stop = offsets[t + 1]
        m = stop - start
        idx = np.empty(m, np.int64)
        alphas = np.empty(m)
        trans = np.empty(m)
        gauss = np.empty(m)
        cab = np.empty(m)
        cbb = np.empty(m)
        ccb = np.empty(m)
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                a = out_a[py, px]
                gd = 0.0
                gn0 = 0.0
                gn1 = 0.0
                gn2 = 0.0
                ga = g_a[py, px]
                if a > ALPHA_EPS:
                    gd = g_d[py, px] / a
                    gn0 = g_n[py, px, 0] / a
                    gn1 = g_n[py, px, 1] / a
                    gn2 = g_n[py, px, 2] / a
                    ga -= gd * out_d[py, px] + gn0 * out_n[py, px, 0] + gn1 * out_n[py, px, 1] \
                        + gn2 * out_n[py, px, 2]
                gc0 = g_c[py, px, 0]
                gc1 = g_c[py, px, 1]
                gc2 = g_c[py, px, 2]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and ga == 0.0 and gd == 0.0 \
                        and gn0 == 0.0 and gn1 == 0.0 and gn2 == 0.0:
                    continue
                # replay the forward pass to recover alpha_i and T_i
                cnt = 0
                T = 1.0
                for k in range(start, last[py, px]):
                    dx = px - pk[k, 0]
                    dy = py - pk[k, 1]
                    power = -0.5 * (pk[k, 2] * dx * dx + 2.0 * pk[k, 3] * dx * dy
                                    + pk[k, 4] * dy * dy)
                    if power < power_min or power > 0.0:
                        continue
                    i = lists[k]
                    gauss[cnt] = np.exp(power)
                    alpha = pk[k, 5] * gauss[cnt]
                    idx[cnt] = i
                    cab[cnt] = pk[k, 2]
                    cbb[cnt] = pk[k, 3]
                    ccb[cnt] = pk[k, 4]
                    alphas[cnt] = alpha
                    trans[cnt] = T
                    T *= 1.0 - alpha
                    cnt += 1
                # back-to-front: acc = sum_{j>i} prod_{i<l<j}(1-a_l) a_j (gO . f_j)
                acc = 0.0
                for r in range(cnt - 1, -1, -1):
                    i = idx[r]
                    alpha = alphas[r]
                    T = trans[r]
                    w = alpha * T
                    dx = px - u[i, 0]
                    dy = py - u[i, 1]
                    di = depth[i] + dgrad[i, 0] * dx + dgrad[i, 1] * dy
                    floored = di < DEPTH_FLOOR
                    if floored:
                        di = DEPTH_FLOOR
                    gf = (gc0 * color[i, 0] + gc1 * color[i, 1] + gc2 * color[i, 2] + ga
                          + gd * di + gn0 * normal[i, 0] + gn1 * normal[i, 1] + gn2 * normal[i, 2])
                    d_color[i, 0] += w * gc0
                    d_color[i, 1] += w * gc1
                    d_color[i, 2] += w * gc2
                    d_normal[i, 0] += w * gn0
                    d_normal[i, 1] += w * gn1
                    d_normal[i, 2] += w * gn2
                    wd = 0.0 if floored else w * gd
                    d_depth[i] += wd
                    d_dgrad[i, 0] += wd * dx
                    d_dgrad[i, 1] += wd * dy
                    d_u[i, 0] -= wd * dgrad[i, 0]
                    d_u[i, 1] -= wd * dgrad[i, 1]
                    dalpha = T * (gf - acc)
                    acc = alpha * gf + (1.0 - alpha) * acc
                    d_opacity[i] += dalpha * gauss[r]
                    dpow = dalpha * alpha
                    d_conic[i, 0] += -0.5 * dpow * dx * dx
                    d_conic[i, 1] += -dpow * dx * dy
                    d_conic[i, 2] += -0.5 * dpow * dy * dy
                    d_u[i, 0] += dpow * (cab[r] * dx + cbb[r] * dy)
                    d_u[i, 1] += dpow * (cbb[r] * dx + ccb[r] * dy)
    return d_u, d_conic, d_opacity, d_color, d_depth, d_dgrad, d_normal


class RasterContext:
    """Binned, depth-sorted surfels for one camera; reused by the backward pass."""

    def __init__(self, proj, width, height, cutoff_sigma=3.0, tile=TILE, t_min=T_MIN):
        self.proj = proj
        self.width = int(width)
        self.height = int(height)
        self.tile = int(tile)
        self.t_min = float(t_min)
        self.power_min = -0.5 * cutoff_sigma ** 2
        vis = np.flatnonzero(proj.visible)
        order = vis[np.argsort(proj.depth[vis], kind="stable")]
        self.order = order
        # axis-aligned half extents of the cutoff ellipse: k * sqrt(diag(cov))
        cov = proj.cov2d
        ext = cutoff_sigma * np.sqrt(np.stack([cov[:, 0, 0], cov[:, 1, 1]], -1)) + 1.0
        self.offsets, self.lists = _bin_tiles(order, proj.u, ext, self.width, self.height, self.tile)
        l = self.lists
        self.packed = np.ascontiguousarray(np.column_stack([proj.u[l], proj.conic[l], proj.opacity[l]]))

    def _args(self):
        p = self.proj
        return (self.offsets, self.lists, self.packed, p.u, p.color, p.depth,
                p.depth_grad, p.normal, self.width, self.height, self.tile, self.power_min)

    def forward(self):
        c, a, d, n, last = _forward(*self._args(), self.t_min)
        self.out = (a, d, n, last)
        return c, a, d, n

    def backward(self, g_color, g_alpha, g_depth, g_normal):
        a, d, n, last = self.out
        h, w = self.height, self.width
        z3 = np.zeros((h, w, 3))
        z1 = np.zeros((h, w))
        res = _backward(*self._args(), a, d, n, last,
                        z3 if g_color is None else np.ascontiguousarray(g_color, dtype=np.float64),
                        z1 if g_alpha is None else np.ascontiguousarray(g_alpha, dtype=np.float64),
                        z1 if g_depth is None else np.ascontiguousarray(g_depth, dtype=np.float64),
                        z3 if g_normal is None else np.ascontiguousarray(g_normal, dtype=np.float64))
        keys = ("u", "conic", "opacity", "color", "depth", "depth_grad", "normal")
        return dict(zip(keys, res))


def rasterize_reference(proj, width, height, cutoff_sigma=3.0, t_min=T_MIN):
    """Plain-loop compositing of every visible surfel at every pixel.

    No tiles, no binning; used as an oracle for the tiled kernel.
    """
    vis = [i for i in range(len(proj.opacity)) if proj.visible[i]]
    vis.sort(key=lambda i: (proj.depth[i], i))
    power_min = -0.5 * cutoff_sigma ** 2
    color = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    depth = np.zeros((height, width))
    normal = np.zeros((height, width, 3))
    for y in range(height):
        for x in range(width):
            T = 1.0
            acc_c = np.zeros(3)
            acc_d = 0.0
            acc_n = np.zeros(3)
            for i in vis:
                d = np.array([x, y], dtype=np.float64) - proj.u[i]
                a, b, c = proj.conic[i]
                power = -0.5 * (a * d[0] ** 2 + 2 * b * d[0] * d[1] + c * d[1] ** 2)
                if power < power_min or power > 0:
                    continue
                al = proj.opacity[i] * np.exp(power)
                acc_c += T * al * proj.color[i]
                acc_d += T * al * max(proj.depth[i] + proj.depth_grad[i] @ d, DEPTH_FLOOR)
                acc_n += T * al * proj.normal[i]
                T *= 1 - al
                if T < t_min:
                    break
            alpha[y, x] = 1 - T
            color[y, x] = acc_c
            if 1 - T > ALPHA_EPS:
                depth[y, x] = acc_d / (1 - T)
                normal[y, x] = acc_n / (1 - T)
    return color, alpha, depth, normal
