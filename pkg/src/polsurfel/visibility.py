"""Depth-guided visibility between a reference view and its neighbours.

Rendered depth buffers hold camera z.  Back-projection and the comparison
against neighbour views work with distances along the unit ray, so depth is
converted with ``range = z * |ray(u)|`` where ``ray(u)`` has unit z.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render.shading import ALPHA_THRESHOLD

DEFAULT_TAU = 0.010
DEFAULT_STRIDE = 4


def range_from_depth(depth, cam):
    return depth * np.linalg.norm(cam.camera_rays(), axis=-1)


@dataclass
class PseudoSurfacePoints:
    points: np.ndarray   # (M, 3) world
    pixels: np.ndarray   # (M, 2) integer (x, y) in the source view
    ranges: np.ndarray   # (M,) distance from the source camera centre
    camera: object

    def __len__(self):
        return len(self.points)


def backproject(depth, cam, mask=None, stride=DEFAULT_STRIDE, alpha=None, offset=0,
                exclude_edges=False, edge_ratio=0.05) -> PseudoSurfacePoints:
    """Lift pixels on a ``stride`` grid to world points x = c + range * r(u).

    Pixels outside ``mask`` or with ``alpha`` at or below the shading
    threshold are skipped.  ``exclude_edges`` drops pixels whose depth jumps
    by more than ``edge_ratio`` (relative) to a 4-neighbour.
    """
    h, w = depth.shape
    keep = np.zeros((h, w), bool)
    keep[offset::stride, offset::stride] = True
    keep &= depth > 0
    if mask is not None:
        keep &= np.asarray(mask, bool)
    if alpha is not None:
        keep &= alpha > ALPHA_THRESHOLD
    if exclude_edges:
        pad = np.pad(depth, 1, mode="edge")
        jump = np.zeros_like(depth)
        for dy, dx in ((0, 1), (2, 1), (1, 0), (1, 2)):
            jump = np.maximum(jump, np.abs(pad[dy:dy + h, dx:dx + w] - depth))
        keep &= jump <= edge_ratio * depth
    ys, xs = np.nonzero(keep)
    pix = np.stack([xs, ys], -1)
    rays = cam.camera_rays(pix.astype(np.float64))
    rng = depth[ys, xs] * np.linalg.norm(rays, axis=-1)
    pts = cam.camera_to_world(rays * depth[ys, xs, None])
    return PseudoSurfacePoints(pts, pix, rng, cam)


def _taps(shape, uv, valid):
    """Bilinear taps with a nearest-pixel fallback.

    Returns ``(taps, ok)`` where ``taps`` is a list of ``(y, x, weight)``;
    weights are zero for unused taps.
    """
    h, w = shape
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    valid = np.ones((h, w), bool) if valid is None else valid
    x, y = uv[:, 0], uv[:, 1]
    finite = np.isfinite(x) & np.isfinite(y)
    x = np.where(finite, x, -10.0)
    y = np.where(finite, y, -10.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx, fy = x - x0, y - y0
    full = (x0 >= 0) & (y0 >= 0) & (x0 + 1 <= w - 1) & (y0 + 1 <= h - 1)
    cx0, cy0 = np.clip(x0, 0, w - 2), np.clip(y0, 0, h - 2)
    taps = []
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            taps.append((cy0 + dy, cx0 + dx, wy * wx))
            full &= valid[cy0 + dy, cx0 + dx]
    xn, yn = np.rint(x).astype(int), np.rint(y).astype(int)
    near_in = (xn >= 0) & (xn < w) & (yn >= 0) & (yn < h)
    xn, yn = np.clip(xn, 0, w - 1), np.clip(yn, 0, h - 1)
    near_ok = near_in & valid[yn, xn]
    taps = [(ty, tx, np.where(full, tw, 0.0)) for ty, tx, tw in taps]
    taps.append((yn, xn, np.where(full, 0.0, 1.0)))
    return taps, finite & (full | near_ok)


def sample_bilinear(img, uv, valid=None):
    """Bilinear lookup with a nearest-pixel fallback.

    Returns ``(values, ok)``.  The bilinear result is used when all four taps
    are inside the image and valid; otherwise the nearest pixel is used if it
    is inside and valid; otherwise ``ok`` is False.
    """
    taps, ok = _taps(img.shape[:2], uv, valid)
    return sum(tw * img[ty, tx] for ty, tx, tw in taps), ok


def sample_plane(depth, normal, cam, uv, valid=None, min_cos=0.05):
    """Camera z along the ray through ``uv`` from the tangent planes of the
    surrounding pixels, blended with bilinear weights.

    Each tap contributes the intersection of the ray with the plane through
    its back-projected point and its (camera-space) normal.  Taps whose plane
    is within ``min_cos`` of grazing the ray fall back to their plain depth.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    taps, ok = _taps(depth.shape, uv, valid)
    ray = cam.camera_rays(np.where(np.isfinite(uv), uv, 0.0))
    rn = ray / np.linalg.norm(ray, axis=-1, keepdims=True)
    out = np.zeros(len(uv))
    for ty, tx, tw in taps:
        z = depth[ty, tx]
        n = normal[ty, tx]
        nl = np.linalg.norm(n, axis=-1)
        n = n / np.where(nl > 0, nl, 1.0)[:, None]
        p = z[:, None] * cam.camera_rays(np.stack([tx, ty], -1).astype(np.float64))
        den = np.sum(n * ray, -1)
        use = (nl > 0) & (np.abs(np.sum(n * rn, -1)) > min_cos)
        zp = np.where(use, np.sum(n * p, -1) / np.where(use, den, 1.0), z)
        out += tw * zp
    return out, ok


def visibility_mask(points: PseudoSurfacePoints, cam_k, depth_k, tau=DEFAULT_TAU, alpha_k=None,
                    normal_k=None):
    """Binary visibility of every pseudo-surface point from ``cam_k``.

    A point is visible when the rendered distance along the ray through its
    projection agrees with its true distance to the camera within ``tau``.
    ``depth_k`` must be a detached snapshot (plain array).  Depth is read by
    bilinear interpolation, or from the rendered tangent planes when the
    camera-space ``normal_k`` buffer is given.
    """
    pts = points.points if isinstance(points, PseudoSurfacePoints) else np.asarray(points)
    uv, z = cam_k.project_points(pts)
    valid = None if alpha_k is None else alpha_k > ALPHA_THRESHOLD
    if normal_k is None:
        z_k, ok = sample_bilinear(depth_k, uv, valid)
    else:
        z_k, ok = sample_plane(depth_k, normal_k, cam_k, uv, valid)
    # camera z to distance with the exact ray through the projection
    rendered = z_k * np.linalg.norm(cam_k.camera_rays(np.where(np.isfinite(uv), uv, 0.0)), axis=-1)
    dist = np.linalg.norm(pts - cam_k.center, axis=-1)
    return ok & (z > 0) & (np.abs(rendered - dist) < tau)


def oracle_visibility(points, cam_k, scene, eps=1e-4):
    """Ground-truth visibility against an analytic scene.

    Each point is snapped to the nearest true surface point; it is visible
    when that surface faces the camera and a sphere-traced march toward the
    camera centre reaches it without hitting the scene.
    """
    pts = points.points if isinstance(points, PseudoSurfacePoints) else np.asarray(points)
    surf, nrm = scene.closest_surface_point(pts)
    to_cam = cam_k.center - surf
    dist = np.linalg.norm(to_cam, axis=-1)
    d = to_cam / dist[:, None]
    facing = np.sum(nrm * d, -1) > 0
    origin = surf + eps * nrm
    hit = scene.march(origin, d, dist - eps)
    return facing & ~hit


def confusion(pred, truth):
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    return {"tp": int(np.sum(pred & truth)), "fp": int(np.sum(pred & ~truth)),
            "fn": int(np.sum(~pred & truth)), "tn": int(np.sum(~pred & ~truth))}
