"""Gaussian surfels, pinhole cameras and the surfel-to-image projection.

A surfel is a 3D Gaussian flattened along its local z axis.  Scales are
stored as logs and opacity as a logit so an optimizer step can never leave
the valid range.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

SH_C0 = 0.28209479177387814
NEAR_PLANE = 0.01
COV2D_DILATION = 0.3
GRAZING_COS = 0.05


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q):
    """Rotation matrices from (w, x, y, z) quaternions; input need not be unit."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q, dR):
    """Pull a gradient on R(q / |q|) back to the raw quaternion q."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = lambda i, j: dR[..., i, j]
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


@dataclass
class SurfelSet:
    """A population of surfels in raw (optimizer-facing) parameterization."""

    xyz: np.ndarray           # (N, 3)
    log_scale: np.ndarray     # (N, 2)
    quat: np.ndarray          # (N, 4) w, x, y, z
    opacity_logit: np.ndarray  # (N,)
    f_dc: np.ndarray          # (N, 3) degree-0 SH coefficients

    PARAMS = ("xyz", "log_scale", "quat", "opacity_logit", "f_dc")

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 2)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(n, 4)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.f_dc = np.asarray(self.f_dc, dtype=np.float64).reshape(n, 3)

    @classmethod
    def from_values(cls, xyz, scale, quat, opacity, color):
        """Build from physical values (linear scales, opacity in (0,1), RGB colour)."""
        color = np.asarray(color, dtype=np.float64)
        return cls(xyz, np.log(scale), quat, logit(opacity), (color - 0.5) / SH_C0)

    def __len__(self):
        return len(self.xyz)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return sigmoid(self.opacity_logit)

    @property
    def color(self):
        return np.maximum(SH_C0 * self.f_dc + 0.5, 0.0)

    @property
    def rotation(self):
        return quat_to_rotmat(self.quat)

    @property
    def normal(self):
        return self.rotation[:, :, 2]

    def copy(self) -> "SurfelSet":
        return SurfelSet(*(getattr(self, k).copy() for k in self.PARAMS))

    def subset(self, idx) -> "SurfelSet":
        return SurfelSet(*(getattr(self, k)[idx] for k in self.PARAMS))

    def concat(self, other: "SurfelSet") -> "SurfelSet":
        return SurfelSet(*(np.concatenate([getattr(self, k), getattr(other, k)]) for k in self.PARAMS))

    def normalize_quaternions(self):
        self.quat /= np.linalg.norm(self.quat, axis=1, keepdims=True)

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(getattr(self, k)) for k in self.PARAMS}


def covariance_world(surfels: SurfelSet) -> np.ndarray:
    """World covariance R diag(sx^2, sy^2, 0) R^T for every surfel, (N, 3, 3)."""
    R = surfels.rotation
    s = surfels.scale
    M = R[:, :, :2] * s[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def surfel_normal(surfels: SurfelSet) -> np.ndarray:
    return surfels.normal


@dataclass
class Camera:
    """Pinhole camera; ``R`` maps world to camera, rows are r1, r2, r3."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *,
                width=128, height=128, fov_deg=40.0):
        center = np.asarray(center, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - center
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        if abs(fwd @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0, width, height,
                   np.stack([right, down, fwd]), center)

    @property
    def r1(self):
        return self.R[0]

    @property
    def r2(self):
        return self.R[1]

    @property
    def r3(self):
        return self.R[2]

    def with_resolution(self, width, height) -> "Camera":
        sx, sy = width / self.width, height / self.height
        return replace(self, fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy,
                       width=int(width), height=int(height))

    def world_to_camera(self, pts):
        return (np.asarray(pts, dtype=np.float64) - self.center) @ self.R.T

    def camera_to_world(self, pts):
        return np.asarray(pts, dtype=np.float64) @ self.R + self.center

    def project_points(self, pts):
        """Pixel coordinates and camera z of world points."""
        p = self.world_to_camera(pts)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], -1)
        return u, z

    def pixel_grid(self):
        """Pixel-centre coordinates (H, W, 2); centres sit on integer coordinates."""
        j, i = np.meshgrid(np.arange(self.width, dtype=np.float64),
                           np.arange(self.height, dtype=np.float64))
        return np.stack([j, i], -1)

    def camera_rays(self, uv=None):
        """Un-normalized camera-space rays with unit z through pixels ``uv``."""
        uv = self.pixel_grid() if uv is None else np.asarray(uv, dtype=np.float64)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy,
                         np.ones(uv.shape[:-1])], -1)

    def world_rays(self, uv=None):
        """Unit world-space ray directions through pixels ``uv``."""
        d = self.camera_rays(uv)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.R

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.R.reshape(-1).tolist(), "center": self.center.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), d["center"])


@dataclass
class CameraView:
    """A camera plus whatever was observed from it."""

    camera: Camera
    s0: Optional[np.ndarray] = None   # (H, W, 3)
    s1: Optional[np.ndarray] = None
    s2: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None  # (H, W) bool
    aop: Optional[np.ndarray] = None   # (H, W)
    aop_valid: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mask is not None:
            shape = (self.camera.height, self.camera.width)
            if np.shape(self.mask) != shape:
                raise ValueError(f"mask shape {np.shape(self.mask)} does not match image {shape}")


@dataclass
class ProjectedSurfel:
    u: np.ndarray
    cov2d: np.ndarray
    depth_at_mean: float
    depth_gradient: np.ndarray
    normal_cam: np.ndarray


@dataclass
class Projection:
    """Per-surfel screen-space quantities for one camera, plus backward caches."""

    visible: np.ndarray   # (N,) bool
    u: np.ndarray         # (N, 2)
    cov2d: np.ndarray     # (N, 2, 2), dilated
    conic: np.ndarray     # (N, 3) a, b, c of the inverse covariance
    depth: np.ndarray     # (N,) camera z of the centre
    depth_grad: np.ndarray  # (N, 2)
    normal: np.ndarray    # (N, 3) camera-space, facing the camera
    opacity: np.ndarray
    color: np.ndarray
    radius: np.ndarray    # (N,) pixel radius of the cutoff ellipse
    cache: dict


def project(surfels: SurfelSet, cam: Camera, cutoff_sigma: float = 3.0) -> Projection:
    """Project every surfel into ``cam``.

    The 2D covariance uses the local affine approximation of the perspective
    map plus a fixed dilation.  The per-pixel depth of a surfel is its
    tangent-plane intersection linearized about the projected centre:
    d(u) = z + g . (u - u_i).
    """
    fx, fy = cam.fx, cam.fy
    Rot = surfels.rotation
    scale = surfels.scale
    p = (surfels.xyz - cam.center) @ cam.R.T
    px, py, pz = p[:, 0], p[:, 1], p[:, 2]
    front = pz > NEAR_PLANE
    z = np.where(front, pz, 1.0)

    u = np.stack([fx * px / z + cam.cx, fy * py / z + cam.cy], -1)
    A = np.einsum("ij,njk->nik", cam.R, Rot[:, :, :2])  # camera-space tangent axes
    M = A * scale[:, None, :]
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * px / z ** 2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * py / z ** 2
    T2 = J @ M
    cov = T2 @ np.swapaxes(T2, 1, 2)
    cov[:, 0, 0] += COV2D_DILATION
    cov[:, 1, 1] += COV2D_DILATION
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], -1)

    n_raw = Rot[:, :, 2] @ cam.R.T
    den = np.sum(n_raw * p, axis=1)
    sgn = np.where(den > 0, -1.0, 1.0)
    pnorm = np.linalg.norm(p, axis=1)
    floor = GRAZING_COS * pnorm
    clamped = np.abs(den) < floor
    den_c = np.where(clamped, -sgn * floor, den)
    depth_grad = np.stack([-z ** 2 * n_raw[:, 0] / (fx * den_c),
                           -z ** 2 * n_raw[:, 1] / (fy * den_c)], -1)

    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.1))
    radius = np.ceil(cutoff_sigma * np.sqrt(lam))
    inside = ((u[:, 0] + radius >= 0) & (u[:, 0] - radius <= cam.width - 1)
              & (u[:, 1] + radius >= 0) & (u[:, 1] - radius <= cam.height - 1))
    visible = front & inside & np.all(np.isfinite(u), axis=1)

    cache = dict(Rot=Rot, A=A, M=M, J=J, T2=T2, p=p, z=z, n_raw=n_raw, den_c=den_c,
                 clamped=clamped, sgn=sgn, pnorm=pnorm, scale=scale, cam=cam)
    return Projection(visible, u, cov, conic, z, depth_grad, n_raw * sgn[:, None],
                      surfels.opacity, surfels.color, radius, cache)


def project_one(surfels: SurfelSet, index: int, cam: Camera) -> Optional[ProjectedSurfel]:
    """Single-surfel projection; ``None`` when the surfel is culled."""
    pr = project(surfels.subset([index]), cam)
    if not pr.visible[0]:
        return None
    return ProjectedSurfel(pr.u[0], pr.cov2d[0], float(pr.depth[0]), pr.depth_grad[0], pr.normal[0])


def taylor_depth_jpr(surfels: SurfelSet, index: int, cam: Camera, uv) -> np.ndarray:
    """Depth d(u) written as z + (W R)[2, :2] J_pr^-1 (u - u_i).

    ``J_pr`` maps tangent-plane coordinates of the surfel to pixels.  Used to
    cross-check the closed form carried by :func:`project`.
    """
    Rot = surfels.rotation[index]
    p = cam.world_to_camera(surfels.xyz[index])
    Wr = cam.R @ Rot
    J = np.array([[cam.fx / p[2], 0, -cam.fx * p[0] / p[2] ** 2],
                  [0, cam.fy / p[2], -cam.fy * p[1] / p[2] ** 2]])
    Jpr = J @ Wr[:, :2]
    u0 = np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
    duv = np.asarray(uv, dtype=np.float64) - u0
    return p[2] + duv @ np.linalg.solve(Jpr, np.eye(2)).T @ Wr[2, :2]


def project_backward(surfels: SurfelSet, proj: Projection, g: dict) -> dict:
    """Chain screen-space gradients back to raw surfel parameters.

    ``g`` holds per-surfel gradients named ``u`` (N,2), ``conic`` (N,3),
    ``opacity`` (N,), ``color`` (N,3), ``depth`` (N,), ``depth_grad`` (N,2)
    and ``normal`` (N,3).  Returns gradients keyed like :attr:`SurfelSet.PARAMS`.
    """
    c = proj.cache
    cam = c["cam"]
    fx, fy = cam.fx, cam.fy
    vis = proj.visible.astype(np.float64)
    p, z, J, M, A, T2 = c["p"], c["z"], c["J"], c["M"], c["A"], c["T2"]
    px, py = p[:, 0], p[:, 1]
    n_raw, den_c, sgn = c["n_raw"], c["den_c"], c["sgn"]
    scale = c["scale"]

    out = {}
    col_unclamped = SH_C0 * surfels.f_dc + 0.5
    out["f_dc"] = g["color"] * SH_C0 * (col_unclamped > 0) * vis[:, None]
    o = proj.opacity
    out["opacity_logit"] = g["opacity"] * o * (1 - o) * vis

    dp = np.zeros_like(p)
    # screen mean
    du = g["u"]
    dp[:, 0] += du[:, 0] * fx / z
    dp[:, 1] += du[:, 1] * fy / z
    dp[:, 2] += -du[:, 0] * fx * px / z ** 2 - du[:, 1] * fy * py / z ** 2
    dp[:, 2] += g["depth"]

    # conic -> 2D covariance -> T2 = J M
    a, b, cc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    conic_m = np.stack([np.stack([a, b], -1), np.stack([b, cc], -1)], -2)
    gc = g["conic"]
    G = np.stack([np.stack([gc[:, 0], 0.5 * gc[:, 1]], -1), np.stack([0.5 * gc[:, 1], gc[:, 2]], -1)], -2)
    dcov = -conic_m @ G @ conic_m
    dT2 = 2.0 * dcov @ T2
    dJ = dT2 @ np.swapaxes(M, 1, 2)
    dM = np.swapaxes(J, 1, 2) @ dT2
    dp[:, 0] += dJ[:, 0, 2] * (-fx / z ** 2)
    dp[:, 1] += dJ[:, 1, 2] * (-fy / z ** 2)
    dp[:, 2] += (dJ[:, 0, 0] * (-fx / z ** 2) + dJ[:, 0, 2] * (2 * fx * px / z ** 3)
                 + dJ[:, 1, 1] * (-fy / z ** 2) + dJ[:, 1, 2] * (2 * fy * py / z ** 3))

    dA = dM * scale[:, None, :]
    dscale = np.sum(dM * A, axis=1)
    out["log_scale"] = dscale * scale * vis[:, None]

    # depth gradient g = -z^2 (n_x / fx, n_y / fy) / den
    dg = g["depth_grad"]
    gx = -z ** 2 * n_raw[:, 0] / (fx * den_c)
    gy = -z ** 2 * n_raw[:, 1] / (fy * den_c)
    dn_raw = g["normal"] * sgn[:, None]
    dn_raw[:, 0] += dg[:, 0] * (-z ** 2 / (fx * den_c))
    dn_raw[:, 1] += dg[:, 1] * (-z ** 2 / (fy * den_c))
    dp[:, 2] += dg[:, 0] * 2 * gx / z + dg[:, 1] * 2 * gy / z
    dden = -(dg[:, 0] * gx + dg[:, 1] * gy) / den_c
    free = ~c["clamped"]
    dn_raw += (dden * free)[:, None] * p
    dp += (dden * free)[:, None] * n_raw
    dp += (dden * ~free * (-sgn) * GRAZING_COS / c["pnorm"])[:, None] * p

    # camera-space axes -> rotation matrix
    dRot = np.zeros((len(p), 3, 3))
    dRot[:, :, :2] = np.einsum("ji,njk->nik", cam.R, dA)
    dRot[:, :, 2] = dn_raw @ cam.R
    out["quat"] = rotmat_grad_to_quat(surfels.quat, dRot) * vis[:, None]
    out["xyz"] = (dp @ cam.R) * vis[:, None]
    return out
