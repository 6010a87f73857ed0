"""Training objectives and their gradients with respect to rendered buffers.

Every ``l_*`` function returns the loss value, or ``(value, grad)`` when
called with ``grad=True``; gradients have the shape of the first prediction
argument.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .render.shading import ALPHA_THRESHOLD
from .tangent import tsc_terms

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
BCE_EPS = 1e-6
LOSS_NAMES = ("l_rgb", "l_pol", "l_tsc", "l_m", "l_o", "l_d")


class LossInputError(ValueError):
    pass


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise LossInputError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


@nb.njit(cache=True, fastmath=True)
def _corr_rows(img, k):
    """out[i, j, c] = sum_t k[t] img[i + t, j, c] (valid along axis 0)."""
    m = len(k)
    h, w, ch = img.shape
    out = np.zeros((h - m + 1, w, ch))
    for i in range(h - m + 1):
        for t in range(m):
            kt = k[t]
            for j in range(w):
                for c in range(ch):
                    out[i, j, c] += kt * img[i + t, j, c]
    return out


@nb.njit(cache=True, fastmath=True)
def _corr_cols(img, k):
    m = len(k)
    h, w, ch = img.shape
    out = np.zeros((h, w - m + 1, ch))
    for i in range(h):
        for t in range(m):
            kt = k[t]
            for j in range(w - m + 1):
                for c in range(ch):
                    out[i, j, c] += kt * img[i, j + t, c]
    return out


@nb.njit(cache=True, fastmath=True)
def _scatter_rows(g, k, h):
    m = len(k)
    _, w, ch = g.shape
    out = np.zeros((h, w, ch))
    for i in range(g.shape[0]):
        for t in range(m):
            kt = k[t]
            for j in range(w):
                for c in range(ch):
                    out[i + t, j, c] += kt * g[i, j, c]
    return out


@nb.njit(cache=True, fastmath=True)
def _scatter_cols(g, k, w):
    m = len(k)
    h, _, ch = g.shape
    out = np.zeros((h, w, ch))
    for i in range(h):
        for t in range(m):
            kt = k[t]
            for j in range(g.shape[1]):
                for c in range(ch):
                    out[i, j + t, c] += kt * g[i, j, c]
    return out


def _as3(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def _filter_valid(img, k):
    """Separable 'valid' correlation over the two leading axes."""
    out = _corr_cols(_corr_rows(_as3(img), k), k)
    return out.reshape(out.shape[:2] + np.shape(img)[2:])


def _filter_valid_adjoint(g, k, shape):
    out = _scatter_rows(_scatter_cols(_as3(g), k, shape[1]), k, shape[0])
    return out.reshape(shape)


@nb.njit(cache=True, fastmath=True, error_model="numpy")
def _ssim_map(f, ch, grad):
    """SSIM map from filtered moments ``f = (mx, my, exx, eyy, exy)`` stacked on
    the channel axis, and the mean-SSIM gradient with respect to
    ``(mx, exx, exy)`` (same stacking)."""
    h, w, _ = f.shape
    smap = np.empty((h, w, ch))
    d = np.zeros((h, w, 3 * ch))
    g = 1.0 / (h * w * ch)
    for i in range(h):
        for j in range(w):
            for c in range(ch):
                mx = f[i, j, c]
                my = f[i, j, ch + c]
                sxx = f[i, j, 2 * ch + c] - mx * mx
                syy = f[i, j, 3 * ch + c] - my * my
                sxy = f[i, j, 4 * ch + c] - mx * my
                a1 = 2 * mx * my + SSIM_C1
                a2 = 2 * sxy + SSIM_C2
                b1 = mx * mx + my * my + SSIM_C1
                b2 = sxx + syy + SSIM_C2
                s = a1 * a2 / (b1 * b2)
                smap[i, j, c] = s
                if grad:
                    d[i, j, c] = g * (2 * my * (a2 - a1) / (b1 * b2) - s * 2 * mx / b1 + s * 2 * mx / b2)
                    d[i, j, ch + c] = -g * s / b2
                    d[i, j, 2 * ch + c] = g * 2 * a1 / (b1 * b2)
    return smap, d


def ssim(x, y, grad=False):
    """Mean SSIM over all fully-inside 11x11 Gaussian windows (sigma 1.5), data range 1.

    Channels (trailing axis) are treated independently and averaged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _same_shape(x, y)
    k = gaussian_window()
    x3, y3 = _as3(x), _as3(y)
    ch = x3.shape[2]
    # one separable pass over the five stacked moment images
    f = _filter_valid(np.concatenate([x3, y3, x3 * x3, y3 * y3, x3 * y3], -1), k)
    smap, d = _ssim_map(f, ch, grad)
    val = float(smap.mean())
    if not grad:
        return val
    adj = _filter_valid_adjoint(d, k, x3.shape[:2] + (3 * ch,))
    out = adj[..., :ch] + 2 * x3 * adj[..., ch:2 * ch] + y3 * adj[..., 2 * ch:]
    return val, out.reshape(x.shape)


def _masked(a, mask):
    if mask is None:
        return a
    m = np.asarray(mask, dtype=np.float64)
    return a * (m[..., None] if a.ndim == m.ndim + 1 else m)


def l1(pred, gt, mask=None, grad=False):
    _same_shape(pred, gt)
    diff = _masked(pred - gt, mask)
    val = float(np.mean(np.abs(diff)))
    if not grad:
        return val
    return val, _masked(np.sign(diff), mask) / diff.size


def l_rgb(s0_pred, s0_gt, mask=None, grad=False):
    """0.8 L1 + 0.2 (1 - SSIM) / 2 on intensity, both images zeroed outside ``mask``.

    SSIM sees radiance clamped to [0, 1] (its data range); L1 does not.
    """
    _same_shape(s0_pred, s0_gt)
    x, y = _masked(s0_pred, mask), _masked(s0_gt, mask)
    xc, yc = np.clip(x, 0.0, 1.0), np.clip(y, 0.0, 1.0)
    if not grad:
        return 0.8 * l1(x, y) + 0.2 * (1 - ssim(xc, yc)) / 2
    v1, g1 = l1(x, y, grad=True)
    vs, gs = ssim(xc, yc, grad=True)
    gs = np.where((x > 0.0) & (x < 1.0), gs, 0.0)
    return 0.8 * v1 + 0.2 * (1 - vs) / 2, _masked(0.8 * g1 - 0.1 * gs, mask)


def l_pol(s1_pred, s1_gt, s2_pred, s2_gt, mask=None, grad=False):
    if not grad:
        return l1(s1_pred, s1_gt, mask) + l1(s2_pred, s2_gt, mask)
    v1, g1 = l1(s1_pred, s1_gt, mask, grad=True)
    v2, g2 = l1(s2_pred, s2_gt, mask, grad=True)
    return v1 + v2, (g1, g2)


def l_mask(mask_gt, alpha, grad=False):
    """Mean binary cross-entropy between the object mask and accumulated opacity."""
    _same_shape(mask_gt, alpha)
    m = np.asarray(mask_gt, dtype=np.float64)
    a = np.clip(alpha, BCE_EPS, 1 - BCE_EPS)
    val = float(np.mean(-(m * np.log(a) + (1 - m) * np.log(1 - a))))
    if not grad:
        return val
    inside = (alpha > BCE_EPS) & (alpha < 1 - BCE_EPS)
    g = np.where(inside, (-m / a + (1 - m) / (1 - a)) / a.size, 0.0)
    return val, g


def l_opacity(opacity, reduction="mean", negated=False, grad=False):
    """Sum or mean of exp(-20 (o - 0.5)^2) over surfels; minimized at o in {0, 1}.

    ``grad`` is taken with respect to opacity.  ``negated`` flips the sign
    of the whole term.
    """
    o = np.asarray(opacity, dtype=np.float64)
    e = np.exp(-20 * (o - 0.5) ** 2)
    scale = (1.0 / max(len(o), 1)) if reduction == "mean" else 1.0
    sign = -1.0 if negated else 1.0
    val = sign * scale * float(e.sum())
    if not grad:
        return val
    return val, sign * scale * e * (-40 * (o - 0.5))


def depth_normal_targets(depth, cam):
    """Camera-space points of every pixel and the cross-product normal field.

    Returns ``(points, nd, valid_geom, parts)``; ``nd`` faces the camera.
    """
    pts = depth[..., None] * cam.camera_rays()
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    c = np.cross(dy, dx)
    cl = np.linalg.norm(c, axis=-1)
    ok = cl > 1e-12
    nd = c / np.where(ok, cl, 1.0)[..., None]
    return pts, nd, ok, (dx, dy, c, cl)


def l_depth_normal(depth, normal, alpha, cam, grad=False):
    """Mean of 1 - N . n(depth) over interior pixels whose 4-neighbourhood is covered.

    ``normal`` is the raw blended normal; gradients are returned for
    ``(depth, normal)``.
    """
    h, w = depth.shape
    cov = alpha > ALPHA_THRESHOLD
    valid = (cov[1:-1, 1:-1] & cov[1:-1, 2:] & cov[1:-1, :-2] & cov[2:, 1:-1] & cov[:-2, 1:-1])
    _, nd, ok, (dx, dy, c, cl) = depth_normal_targets(depth, cam)
    valid &= ok
    cnt = int(valid.sum())
    N = normal[1:-1, 1:-1]
    if cnt == 0:
        return (0.0, (np.zeros_like(depth), np.zeros_like(normal))) if grad else 0.0
    val = float(np.sum((1 - np.sum(N * nd, -1))[valid]) / cnt)
    if not grad:
        return val
    vm = valid[..., None] / cnt
    g_normal = np.zeros_like(normal)
    g_normal[1:-1, 1:-1] = -nd * vm
    d_nd = -N * vm
    d_c = (d_nd - nd * np.sum(nd * d_nd, -1, keepdims=True)) / np.where(ok, cl, 1.0)[..., None]
    d_dy = np.cross(dx, d_c)
    d_dx = np.cross(d_c, dy)
    d_pts = np.zeros((h, w, 3))
    d_pts[1:-1, 2:] += d_dx
    d_pts[1:-1, :-2] -= d_dx
    d_pts[2:, 1:-1] += d_dy
    d_pts[:-2, 1:-1] -= d_dy
    g_depth = np.sum(d_pts * cam.camera_rays(), -1)
    return val, (g_depth, g_normal)


@dataclass
class TscBatch:
    """Flattened tangent rows for a batch of pseudo-surface points.

    ``point_index`` maps each row to its point; ``pixels`` are the source
    pixels of the points in the reference view.
    """

    pixels: np.ndarray
    point_index: np.ndarray
    t: np.ndarray
    t_hat: np.ndarray
    weight: np.ndarray
    branch: np.ndarray
    n_points: int


def l_tsc(batch: TscBatch, normal, cam, grad=False):
    """Visibility-masked tangent residual averaged over pseudo-surface points.

    Normals are read from the reference view's blended normal buffer at the
    source pixels, renormalized and rotated to world space.
    """
    if batch.n_points == 0 or len(batch.weight) == 0:
        return (0.0, np.zeros_like(normal)) if grad else 0.0
    px = batch.pixels
    raw = normal[px[:, 1], px[:, 0]]
    ln = np.linalg.norm(raw, axis=-1, keepdims=True)
    ok = ln[:, 0] > 1e-8
    n_cam = raw / np.where(ok[:, None], ln, 1.0)
    n_world = n_cam @ cam.R
    r, dr = tsc_terms(batch.t, batch.t_hat, batch.weight * ok[batch.point_index],
                      batch.branch, n_world[batch.point_index])
    val = float(r.sum() / batch.n_points)
    if not grad:
        return val
    dn_world = np.zeros((batch.n_points, 3))
    np.add.at(dn_world, batch.point_index, dr / batch.n_points)
    dn_cam = dn_world @ cam.R.T
    draw = (dn_cam - n_cam * np.sum(n_cam * dn_cam, -1, keepdims=True)) / np.where(ok[:, None], ln, 1.0)
    g = np.zeros_like(normal)
    np.add.at(g, (px[:, 1], px[:, 0]), draw * ok[:, None])
    return val, g


@dataclass
class LossWeights:
    pol: float = 1.0
    tsc: float = 0.1
    mask: float = 0.1
    opacity: float = 0.01
    depth_normal_base: float = 0.01
    depth_normal_slope: float = 0.1
    horizon: int = 15000

    def depth_normal(self, iteration):
        return self.depth_normal_base + self.depth_normal_slope * (iteration / self.horizon)

    def as_dict(self, iteration):
        return {"l_rgb": 1.0, "l_pol": self.pol, "l_tsc": self.tsc, "l_m": self.mask,
                "l_o": self.opacity, "l_d": self.depth_normal(iteration)}


def total(losses: dict, weights: LossWeights, iteration: int) -> float:
    w = weights.as_dict(iteration)
    return float(sum(w[k] * losses.get(k, 0.0) for k in LOSS_NAMES))
