"""Reconstruction metrics: normal angular error and Chamfer distance."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

CHAMFER_SAMPLES = 50_000
MILLI = 1000.0


def angular_error_deg(pred, gt):
    """Per-pixel angle between normal fields, degrees.

    Both inputs are renormalized; a zero-length prediction counts as 90
    degrees (no information).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    lp = np.linalg.norm(pred, axis=-1)
    lg = np.linalg.norm(gt, axis=-1)
    ok = (lp > 1e-12) & (lg > 1e-12)
    cos = np.sum(pred * gt, -1) / np.where(ok, lp * lg, 1.0)
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return np.where(ok, ang, 90.0)


def normal_mae(pred, gt, mask):
    """Mean angular error over ``mask`` (degrees); NaN for an empty mask."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        return float("nan")
    return float(np.mean(angular_error_deg(pred[mask], gt[mask])))


def _subsample(pts, n, rng):
    if len(pts) <= n:
        return pts
    return pts[rng.choice(len(pts), n, replace=False)]


def chamfer(a, b, n_samples=CHAMFER_SAMPLES, seed=0, scale=MILLI):
    """Symmetric mean nearest-neighbour distance between two point clouds.

    ``0.5 * (mean_a d(a, B) + mean_b d(b, A))``, with each cloud randomly
    subsampled to at most ``n_samples`` points and the result multiplied by
    ``scale`` (milli-units by default).  Nearest neighbours come from k-d
    trees.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if not len(a) or not len(b):
        return float("nan")
    rng = np.random.default_rng(seed)
    a, b = _subsample(a, n_samples, rng), _subsample(b, n_samples, rng)
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return float(scale * 0.5 * (dab.mean() + dba.mean()))


def depth_points(depth, cam, mask):
    """World points of every masked pixel of a camera-z depth map."""
    ys, xs = np.nonzero(np.asarray(mask, bool) & (depth > 0))
    rays = cam.camera_rays(np.stack([xs, ys], -1).astype(np.float64))
    return cam.camera_to_world(rays * depth[ys, xs, None])
