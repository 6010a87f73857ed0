"""Synthetic polarimetric multi-view data from analytic shapes.

Ground truth is rendered by exact ray casting.  Diffuse radiance is a
256-sample cosine-weighted quadrature of the environment, specular radiance
is the environment seen along the mirror direction, and the two are combined
into Stokes vectors with the same Fresnel model used by the renderer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io, polcore
from .render.cubemap import Cubemap
from .surfel import Camera, CameraView
from .tangent import DIFFUSE, SPECULAR

MARCH_EPS = 1e-6
MAX_MARCH = 2000


class Shape:
    def sdf(self, p):
        raise NotImplementedError

    def normal(self, p):
        raise NotImplementedError

    def closest_surface_point(self, p):
        raise NotImplementedError

    def intersect(self, o, d, tmax=np.inf):
        """Sphere-traced first hit distance along unit ``d``; ``inf`` on a miss."""
        o = np.asarray(o, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        t = np.zeros(len(o))
        hit = np.zeros(len(o), bool)
        active = np.ones(len(o), bool)
        far = np.minimum(tmax, 100.0)
        for _ in range(MAX_MARCH):
            idx = np.flatnonzero(active)
            if not len(idx):
                break
            s = self.sdf(o[idx] + t[idx, None] * d[idx])
            done = s < MARCH_EPS
            hit[idx[done]] = True
            t[idx[~done]] += s[~done]
            gone = ~done & (t[idx] >= (far[idx] if np.ndim(far) else far))
            active[idx[done | gone]] = False
        return np.where(hit, t, np.inf)

    def march(self, o, d, tmax):
        """True where the segment o + t d, 0 < t < tmax, touches the shape."""
        return np.isfinite(self.intersect(o, d, np.asarray(tmax, dtype=np.float64)))

    def surface_samples(self, n, rng):
        raise NotImplementedError


@dataclass
class Sphere(Shape):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def _c(self):
        return np.asarray(self.center, dtype=np.float64)

    def sdf(self, p):
        return np.linalg.norm(p - self._c(), axis=-1) - self.radius

    def normal(self, p):
        v = p - self._c()
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def closest_surface_point(self, p):
        n = self.normal(p)
        return self._c() + self.radius * n, n

    def intersect(self, o, d, tmax=np.inf):
        oc = np.asarray(o, dtype=np.float64) - self._c()
        b = np.sum(oc * d, -1)
        c = np.sum(oc * oc, -1) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > MARCH_EPS, t0, np.where(t1 > MARCH_EPS, t1, np.inf))
        return np.where((disc >= 0) & (t < tmax), t, np.inf)

    def surface_samples(self, n, rng):
        v = rng.normal(size=(n, 3))
        return self._c() + self.radius * v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class Torus(Shape):
    """Torus around the z axis through ``center``."""

    center: tuple = (0.0, 0.0, 0.0)
    major: float = 0.7
    minor: float = 0.3

    def _ring(self, p):
        q = p - np.asarray(self.center, dtype=np.float64)
        rho = np.linalg.norm(q[..., :2], axis=-1, keepdims=True)
        dirxy = np.concatenate([q[..., :2] / np.maximum(rho, 1e-12), np.zeros_like(rho)], -1)
        ring = np.asarray(self.center) + self.major * dirxy
        return ring

    def sdf(self, p):
        v = p - self._ring(p)
        return np.linalg.norm(v, axis=-1) - self.minor

    def normal(self, p):
        v = p - self._ring(p)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def closest_surface_point(self, p):
        ring = self._ring(p)
        n = self.normal(p)
        return ring + self.minor * n, n

    def surface_samples(self, n, rng):
        # area-weighted by rejection on the major-circle radius
        out = []
        while sum(len(o) for o in out) < n:
            u, v = rng.uniform(0, 2 * np.pi, (2, 2 * n))
            keep = rng.uniform(0, self.major + self.minor, 2 * n) < self.major + self.minor * np.cos(v)
            u, v = u[keep], v[keep]
            r = self.major + self.minor * np.cos(v)
            out.append(np.stack([r * np.cos(u), r * np.sin(u), self.minor * np.sin(v)], -1))
        return np.concatenate(out)[:n] + np.asarray(self.center)


@dataclass
class Union(Shape):
    parts: list = field(default_factory=list)

    def sdf(self, p):
        return np.min([s.sdf(p) for s in self.parts], axis=0)

    def _nearest(self, p):
        return np.argmin(np.abs([s.sdf(p) for s in self.parts]), axis=0)

    def normal(self, p):
        k = self._nearest(p)
        ns = np.stack([s.normal(p) for s in self.parts])
        return ns[k, np.arange(len(p))]

    def closest_surface_point(self, p):
        k = self._nearest(p)
        res = [s.closest_surface_point(p) for s in self.parts]
        sp = np.stack([r[0] for r in res])[k, np.arange(len(p))]
        sn = np.stack([r[1] for r in res])[k, np.arange(len(p))]
        return sp, sn

    def intersect(self, o, d, tmax=np.inf):
        return np.min([s.intersect(o, d, tmax) for s in self.parts], axis=0)

    def surface_samples(self, n, rng):
        pts = np.concatenate([s.surface_samples(n, rng) for s in self.parts])
        pts = pts[np.abs(self.sdf(pts)) < 1e-6]
        return pts[rng.permutation(len(pts))[:n]]


def surfels_on_surface(scene, n, rng, opacity=0.98, spacing=1.0, color=(0.5, 0.5, 0.5)):
    """Opaque surfels tangent to the true surface: a stand-in for converged geometry.

    Scales are ``spacing`` times the RMS distance to the 3 nearest samples.
    """
    from scipy.spatial import cKDTree

    from .surfel import SurfelSet

    pts = scene.surface_samples(n, rng)
    nrm = scene.normal(pts)
    d, _ = cKDTree(pts).query(pts, 4)
    s = spacing * np.sqrt(np.mean(d[:, 1:] ** 2, axis=1))
    # rotation whose third column is the normal
    a = np.where(np.abs(nrm[:, 2:3]) < 0.9, np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]))
    t1 = np.cross(a, nrm)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    R = np.stack([t1, np.cross(nrm, t1), nrm], -1)
    return SurfelSet.from_values(pts, np.stack([s, s], -1), _rotmat_to_quat(R), np.full(len(pts), opacity),
                                 np.broadcast_to(np.asarray(color, dtype=np.float64), (len(pts), 3)))


def _rotmat_to_quat(R):
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(R).as_quat().T
    return np.stack([w, x, y, z], -1)


def make_scene(name: str) -> Shape:
    if name == "sphere":
        return Sphere((0.0, 0.0, 0.0), 1.0)
    if name == "small_sphere":
        return Sphere((0.0, 0.0, 0.0), 0.75)
    if name == "torus":
        return Torus((0.0, 0.0, 0.0), 0.65, 0.3)
    if name == "two_spheres":
        return Union([Sphere((-0.35, 0.0, 0.0), 0.45), Sphere((0.45, 0.1, 0.15), 0.35)])
    raise ValueError(f"unknown scene {name!r}")


@dataclass
class Environment:
    """Unpolarized low-frequency illumination: a constant plus three lobes."""

    base: tuple = (0.25, 0.25, 0.28)
    lobes: tuple = (((0.3, 0.4, 0.866), 6.0, (3.0, 2.8, 2.5)),
                    ((-0.8, -0.3, 0.3), 4.0, (1.2, 1.6, 2.4)),
                    ((0.2, -0.9, -0.4), 3.0, (1.5, 1.0, 0.6)))

    def __call__(self, dirs):
        dirs = np.asarray(dirs, dtype=np.float64)
        out = np.broadcast_to(np.asarray(self.base), dirs.shape[:-1] + (3,)).copy()
        for mu, kappa, col in self.lobes:
            mu = np.asarray(mu) / np.linalg.norm(mu)
            out += np.exp(kappa * (dirs @ mu - 1))[..., None] * np.asarray(col)
        return out

    def cubemap(self, res=64) -> Cubemap:
        return Cubemap.from_function(self, res)


MATERIALS = {
    "mixed": dict(albedo=(0.55, 0.45, 0.35), specular=1.0),
    "reflective": dict(albedo=(0.06, 0.05, 0.05), specular=1.0),
    "diffuse": dict(albedo=(0.6, 0.6, 0.6), specular=0.0),
}


def fibonacci_directions(n, offset=0.0):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    ang = np.pi * (3 - np.sqrt(5)) * i + offset
    return np.stack([r * np.cos(ang), r * np.sin(ang), z], -1)


def cosine_hemisphere_samples(n=256):
    """Deterministic cosine-weighted samples around +z (Fibonacci on the disk)."""
    i = np.arange(n) + 0.5
    r = np.sqrt(i / n)
    ang = np.pi * (3 - np.sqrt(5)) * i
    x, y = r * np.cos(ang), r * np.sin(ang)
    return np.stack([x, y, np.sqrt(np.maximum(0.0, 1 - x * x - y * y))], -1)


def _frames(n):
    a = np.where(np.abs(n[:, 2:3]) < 0.9, np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]))
    t = np.cross(a, n)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    return t, np.cross(n, t)


def diffuse_radiance(normals, env, albedo, eta, n_samples=256, chunk=4096):
    """albedo * E[L(w) T_in^+(cos w)] under cosine-weighted sampling of the hemisphere."""
    local = cosine_hemisphere_samples(n_samples)
    out = np.zeros((len(normals), 3))
    for s in range(0, len(normals), chunk):
        n = normals[s:s + chunk]
        t, b = _frames(n)
        dirs = (local[None, :, 0:1] * t[:, None] + local[None, :, 1:2] * b[:, None]
                + local[None, :, 2:3] * n[:, None])
        tin = polcore.fresnel(local[:, 2], eta).t_plus
        out[s:s + chunk] = np.mean(env(dirs) * tin[None, :, None], axis=1)
    return out * np.asarray(albedo)


@dataclass
class Dataset:
    views: list
    scene: Shape
    scene_name: str
    env: Environment
    eta: float
    material: str

    @property
    def cameras(self):
        return [v.camera for v in self.views]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, v in enumerate(self.views):
            d = directory / f"view_{i:03d}"
            d.mkdir(exist_ok=True)
            q = polcore.quadruple_from_stokes(polcore.StokesImage(v.s0, v.s1, v.s2))
            for name, arr in (("i0", q.i0), ("i45", q.i45), ("i90", q.i90), ("i135", q.i135),
                              ("s0", v.s0), ("s1", v.s1), ("s2", v.s2),
                              ("mask", v.mask.astype(np.float32)),
                              ("gt_depth", v.extras["gt_depth"]),
                              ("gt_normal", v.extras["gt_normal"]),
                              ("gt_aop", np.where(v.mask, v.extras["gt_aop"], -1.0)),
                              ("dominance", v.extras["dominance"].astype(np.float32))):
                io.write_pfm(d / f"{name}.pfm", arr)
        io.write_cameras(directory / "cameras.json", self.cameras,
                         extra={"scene": self.scene_name, "eta": self.eta, "material": self.material})
        io.write_cubemap(directory / "env", self.env.cubemap())

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        cams, names, doc = io.read_cameras(directory / "cameras.json")
        views = []
        for cam, name in zip(cams, names):
            d = directory / name
            rd = lambda k: io.read_pfm(d / f"{k}.pfm").astype(np.float64)
            mask = rd("mask") > 0.5
            s0, s1, s2 = rd("s0"), rd("s1"), rd("s2")
            phi, valid = polcore.aop(s1.sum(-1), s2.sum(-1))
            extras = dict(gt_depth=rd("gt_depth"), gt_normal=rd("gt_normal"),
                          gt_aop=np.maximum(rd("gt_aop"), 0.0),
                          dominance=(rd("dominance") > 0.5).astype(int),
                          dolp=polcore.dolp(s0.sum(-1), s1.sum(-1), s2.sum(-1)),
                          eroded_mask=erode(mask))
            views.append(CameraView(cam, s0, s1, s2, mask, phi, valid & mask, extras))
        scene = doc.get("scene", "sphere")
        return cls(views, make_scene(scene), scene, Environment(), float(doc.get("eta", 1.5)),
                   doc.get("material", "mixed"))


def erode(mask, width=2):
    return ndimage.binary_erosion(mask, iterations=width, border_value=0)


def make_cameras(n_views, resolution=128, distance=3.5, fov_deg=40.0, seed=0):
    if n_views < 2:
        raise ValueError("need at least two views")
    offset = np.random.default_rng(seed).uniform(0, 2 * np.pi)
    dirs = fibonacci_directions(n_views, offset)
    return [Camera.look_at(distance * d, width=resolution, height=resolution, fov_deg=fov_deg)
            for d in dirs]


def surface_stokes(scene, cam, pts, env, material, eta):
    """Exact Stokes vectors leaving surface points ``pts`` toward ``cam``.

    Returns ``(s0, s1, s2, dominance, aux)`` with RGB Stokes rows, the
    dominant pBRDF lobe per point and a dict holding the world normal,
    diffuse and specular radiance.
    """
    mat = MATERIALS[material] if isinstance(material, str) else material
    pts = np.asarray(pts, dtype=np.float64)
    nrm = scene.normal(pts)
    v = cam.center - pts
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    n_cam = nrm @ cam.R.T
    fr = polcore.fresnel(np.clip(np.sum(nrm * v, -1), 0.0, 1.0), eta)
    ld = diffuse_radiance(nrm, env, mat["albedo"], eta)
    refl = -v - 2 * np.sum(-v * nrm, -1, keepdims=True) * nrm
    ls = mat["specular"] * env(refl)
    phi_n = np.arctan2(n_cam[:, 1], n_cam[:, 0])
    s0, s1, s2 = polcore.pbrdf_stokes(ld, ls, phi_n, fr)
    spec_pol = np.abs(ls.sum(-1) * fr.r_minus)
    diff_pol = np.abs(ld.sum(-1) * fr.t_minus)
    dom = np.where(spec_pol > diff_pol, SPECULAR, DIFFUSE)
    return s0, s1, s2, dom, dict(normal=nrm, diffuse=ld, specular=ls, phi_n=phi_n)


def point_aop(scene, cam, pts, env, material, eta):
    """Angle of polarization (channel-summed) and dominance at exact surface points."""
    _, s1, s2, dom, _ = surface_stokes(scene, cam, pts, env, material, eta)
    phi, valid = polcore.aop(s1.sum(-1), s2.sum(-1))
    return phi, valid, dom


def render_view(scene, cam, env, material, eta):
    h, w = cam.height, cam.width
    dirs = cam.world_rays().reshape(-1, 3)
    orig = np.broadcast_to(cam.center, dirs.shape)
    t = scene.intersect(orig, dirs)
    hit = np.isfinite(t)
    pts = orig[hit] + t[hit, None] * dirs[hit]
    s0, s1, s2, dom, aux = surface_stokes(scene, cam, pts, env, material, eta)

    def raster(vals, ch):
        out = np.zeros((h * w, ch) if ch > 1 else h * w)
        out[hit] = vals
        return out.reshape((h, w, ch) if ch > 1 else (h, w))

    mask = hit.reshape(h, w)
    S0, S1, S2 = raster(s0, 3), raster(s1, 3), raster(s2, 3)
    depth = raster(t[hit] * (dirs[hit] @ cam.R[2]), 1)
    phi, valid = polcore.aop(S1.sum(-1), S2.sum(-1))
    extras = dict(gt_depth=depth, gt_normal=raster(aux["normal"], 3), dominance=raster(dom, 1).astype(int),
                  gt_aop=raster(np.mod(aux["phi_n"], np.pi), 1),
                  dolp=polcore.dolp(S0.sum(-1), S1.sum(-1), S2.sum(-1)),
                  eroded_mask=erode(mask), diffuse=raster(aux["diffuse"], 3), specular=raster(aux["specular"], 3))
    return CameraView(cam, S0, S1, S2, mask, phi, valid & mask, extras)


def generate(scene="sphere", n_views=12, resolution=128, eta=polcore.DEFAULT_ETA, seed=0,
             material="mixed", distance=3.5, fov_deg=40.0, env: Environment = None) -> Dataset:
    shape = make_scene(scene) if isinstance(scene, str) else scene
    env = env or Environment()
    cams = make_cameras(n_views, resolution, distance, fov_deg, seed)
    views = [render_view(shape, c, env, material, eta) for c in cams]
    return Dataset(views, shape, scene if isinstance(scene, str) else "custom", env, eta, material)


def scene_spec_json(ds: Dataset):
    return json.dumps({"scene": ds.scene_name, "eta": ds.eta, "material": ds.material})
