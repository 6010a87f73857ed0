"""Tangent-space consistency between surface normals and per-view angle of
polarization.

For an azimuth ``phi`` seen by a camera with rotation rows r1, r2 the two
candidate tangents are

    t(phi)     = cos(phi) r1 - sin(phi) r2
    t_hat(phi) = sin(phi) r1 + cos(phi) r2

and a surface normal must be orthogonal to one of them, which one depending
on whether the pixel is diffuse- or specular-dominated.  Adding pi to phi only
flips signs, so squared residuals never see the pi ambiguity.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

DIFFUSE, SPECULAR, UNKNOWN = 0, 1, -1
DOLP_WEIGHT_KNEE = 0.05


def projected_tangent(phi, cam):
    phi = np.asarray(phi, dtype=np.float64)[..., None]
    return np.cos(phi) * cam.r1 - np.sin(phi) * cam.r2


def pseudo_tangent(phi, cam):
    phi = np.asarray(phi, dtype=np.float64)[..., None]
    return np.sin(phi) * cam.r1 + np.cos(phi) * cam.r2


def sample_aop(view, uv):
    """Bilinear angle of polarization at continuous pixel positions.

    Interpolates the doubled-angle unit vector so the wrap at pi is harmless.
    Returns ``(phi, valid, dominance)``; a sample is valid when all four taps
    are inside the image and carry a defined angle.  Dominance is taken from
    ``view.extras['dominance']`` at the nearest pixel when present.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    h, w = view.aop.shape
    x, y = uv[:, 0], uv[:, 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2)
    y0 = np.minimum(np.floor(y).astype(int), h - 2)
    fx, fy = x - x0, y - y0
    c2 = np.cos(2 * view.aop)
    s2 = np.sin(2 * view.aop)
    ok = np.ones(view.aop.shape, bool) if view.aop_valid is None else view.aop_valid
    acc_c = np.zeros(len(x))
    acc_s = np.zeros(len(x))
    valid = inside.copy()
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            acc_c += wy * wx * c2[yy, xx]
            acc_s += wy * wx * s2[yy, xx]
            valid &= ok[yy, xx] | (wy * wx == 0)
    valid &= np.hypot(acc_c, acc_s) > 1e-9
    phi = np.mod(0.5 * np.arctan2(acc_s, acc_c), np.pi)
    dom = np.full(len(x), UNKNOWN)
    if "dominance" in view.extras:
        dmap = view.extras["dominance"]
        dom = dmap[np.rint(y).astype(int), np.rint(x).astype(int)].astype(int)
    return phi, valid, dom


@dataclass
class TangentSystem:
    """Per-view tangent pairs for one surface point.

    ``branch[k]`` is DIFFUSE (normal orthogonal to ``t``), SPECULAR (to
    ``t_hat``) or UNKNOWN (either).
    """

    t: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    t_hat: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0))
    branch: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    view_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.weight)

    @property
    def underdetermined(self):
        return len(self) < 2

    def rows(self):
        """Every stacked row with its weight: both candidates for unknown branches."""
        rows, ws = [], []
        for k in range(len(self)):
            if self.branch[k] != SPECULAR:
                rows.append(self.t[k])
                ws.append(self.weight[k])
            if self.branch[k] != DIFFUSE:
                rows.append(self.t_hat[k])
                ws.append(self.weight[k])
        return np.reshape(rows, (-1, 3)), np.asarray(ws)


def build_system(point, views, use_dominance=True, dolp_weighting=False) -> TangentSystem:
    """Stack tangent constraints for ``point`` from ``views``.

    ``views`` is a sequence of ``(CameraView, visible)`` pairs.  Views that
    are flagged invisible, that the point projects outside of, or whose
    angle is undefined there contribute nothing.
    """
    point = np.asarray(point, dtype=np.float64)
    sysm = TangentSystem()
    t, th, wts, br = [], [], [], []
    for k, (view, vis) in enumerate(views):
        if not vis:
            continue
        cam = view.camera
        uv, z = cam.project_points(point[None])
        if not z[0] > 0:
            continue
        phi, valid, dom = sample_aop(view, uv)
        if not valid[0]:
            continue
        weight = 1.0
        if dolp_weighting and "dolp" in view.extras:
            xi, yi = np.rint(uv[0]).astype(int)
            weight = min(1.0, view.extras["dolp"][yi, xi] / DOLP_WEIGHT_KNEE)
        t.append(projected_tangent(phi[0], cam))
        th.append(pseudo_tangent(phi[0], cam))
        wts.append(weight)
        br.append(dom[0] if use_dominance else UNKNOWN)
        sysm.view_ids.append(k)
    if t:
        sysm.t, sysm.t_hat = np.array(t), np.array(th)
        sysm.weight, sysm.branch = np.array(wts), np.array(br, int)
    return sysm


def tsc_residual(system: TangentSystem, n, mode: str = "select") -> float:
    """Weighted squared tangent residual of normal ``n``.

    ``mode='select'`` charges each view only its better-fitting candidate
    (or the known branch); ``mode='stack'`` sums both candidates of every
    view as a plain stacked least-squares system.
    """
    n = np.asarray(n, dtype=np.float64)
    if len(system) == 0:
        return 0.0
    rt = (system.t @ n) ** 2
    rh = (system.t_hat @ n) ** 2
    if mode == "stack":
        return float(np.sum(system.weight * (rt + rh)))
    if mode != "select":
        raise ValueError(f"unknown residual mode {mode!r}")
    r = np.where(system.branch == DIFFUSE, rt, np.where(system.branch == SPECULAR, rh, np.minimum(rt, rh)))
    return float(np.sum(system.weight * r))


def solve_normal(system: TangentSystem, max_enumerate: int = 12):
    """Least-squares normal: smallest right singular vector of the stacked rows.

    Unknown branches are resolved by enumerating assignments and keeping the
    one with the smallest singular value.  Returns ``(n, sigma_min,
    underdetermined)``; ``n`` is ``None`` for an empty system.
    """
    if len(system) == 0:
        return None, 0.0, True
    unknown = np.flatnonzero(system.branch == UNKNOWN)
    if len(unknown) > max_enumerate:
        raise ValueError(f"too many unresolved views to enumerate ({len(unknown)})")
    best = None
    for combo in itertools.product((DIFFUSE, SPECULAR), repeat=len(unknown)):
        br = system.branch.copy()
        br[unknown] = combo
        A = np.where((br == DIFFUSE)[:, None], system.t, system.t_hat) * np.sqrt(system.weight)[:, None]
        _, s, vt = np.linalg.svd(A, full_matrices=True)
        sig = s[2] if len(s) > 2 else 0.0
        if best is None or sig < best[1]:
            best = (vt[2], sig)
    return best[0], float(best[1]), system.underdetermined


def tsc_terms(t, t_hat, weight, branch, n):
    """Vectorized residuals and their gradient w.r.t. ``n`` (rows aligned)."""
    dt = np.sum(t * n, -1)
    dh = np.sum(t_hat * n, -1)
    use_t = np.where(branch == DIFFUSE, True, np.where(branch == SPECULAR, False, dt * dt <= dh * dh))
    d = np.where(use_t, dt, dh)
    row = np.where(use_t[:, None], t, t_hat)
    return weight * d * d, (2 * weight * d)[:, None] * row
