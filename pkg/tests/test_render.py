import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import composite_scalar, cube_lookup_scalar, shade_scalar
from conftest import random_surfels
from polsurfel import polcore
from polsurfel.render import Cubemap, backward, rasterize, render
from polsurfel.render.cubemap import face_coords, face_directions
from polsurfel.render.raster import RasterContext
from polsurfel.render.shading import reflect, shade, shade_backward, shade_specular, stokes_compose
from polsurfel.surfel import Camera, SurfelSet, project


def rel_close(a, b, tol):
    scale = max(np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() <= tol * scale


def frontal_camera(size=8, focal=8.0):
    return Camera(focal, focal, size / 2, size / 2, size, size, np.eye(3), np.zeros(3))


def random_texels(rng, res=4):
    return Cubemap(rng.uniform(0.1, 2.0, (6, res, res, 3)))


class TestRasterize:
    def test_single_opaque_frontal(self):
        cam = frontal_camera()
        s = SurfelSet.from_values([[0, 0, 4]], [[1.0, 1.0]], [[1, 0, 0, 0]], [0.999], [[0.2, 0.5, 0.9]])
        b = rasterize(s, cam)
        px = b.color[4, 4]
        assert b.alpha[4, 4] == pytest.approx(0.999)
        assert np.allclose(px / 0.999, [0.2, 0.5, 0.9])
        assert b.depth[4, 4] == pytest.approx(4.0)
        assert np.allclose(b.normal[4, 4], [0, 0, -1])

    def test_full_occlusion(self):
        cam = frontal_camera()
        front = SurfelSet.from_values([[0, 0, 3]], [[3.0, 3.0]], [[1, 0, 0, 0]], [0.9999999], [[1, 0, 0]])
        back = SurfelSet.from_values([[0, 0, 5]], [[3.0, 3.0]], [[1, 0, 0, 0]], [0.9], [[0, 1, 0]])
        b = rasterize(front.concat(back), cam)
        assert b.color[4, 4, 1] < 1e-6 and b.depth[4, 4] == pytest.approx(3.0, abs=1e-5)

    def test_empty_scene_is_background(self):
        cam = frontal_camera()
        s = SurfelSet.from_values([[0, 0, -3]], [[1.0, 1.0]], [[1, 0, 0, 0]], [0.5], [[1, 1, 1]])
        b = rasterize(s, cam)
        assert not b.alpha.any() and not b.color.any() and not b.depth.any()

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cam = Camera.look_at(rng.normal(size=3) * 0.3 + [0, -3, 0], width=8, height=8, fov_deg=35)
        s = random_surfels(rng, int(rng.integers(1, 11)))
        b = rasterize(s, cam)
        c, a, d, n = composite_scalar(s, cam)
        for got, ref in ((b.color, c), (b.alpha, a), (b.depth, d), (b.normal, n)):
            assert rel_close(got, ref, 1e-6)

    def test_tiled_equals_untiled(self, rng):
        cam = Camera.look_at((0.3, -3, 0.5), width=40, height=36)
        s = random_surfels(rng, 60)
        a = rasterize(s, cam, tile=8)
        b = rasterize(s, cam, tile=16)
        c = rasterize(s, cam, tile=64)
        for k in ("color", "alpha", "depth", "normal"):
            assert np.allclose(getattr(a, k), getattr(b, k), atol=1e-12)
            assert np.allclose(getattr(a, k), getattr(c, k), atol=1e-12)

    @given(st.integers(0, 10_000))
    def test_weights_sum_to_alpha(self, seed):
        rng = np.random.default_rng(seed)
        cam = Camera.look_at((0.2, -3, 0.3), width=12, height=12)
        s = random_surfels(rng, 12)
        s.f_dc[:] = (1.0 - 0.5) / 0.28209479177387814   # colour 1: colour buffer = sum of weights
        b = rasterize(s, cam)
        assert np.all((b.alpha >= 0) & (b.alpha <= 1))
        assert np.allclose(b.color[..., 0], b.alpha, atol=1e-12)
        cov = b.alpha > 1e-3
        assert np.all(b.depth[cov] > 0)
        assert np.all(np.linalg.norm(b.normal, axis=-1) <= 1 + 1e-9)

    @given(st.integers(0, 10_000))
    def test_input_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        cam = Camera.look_at((0.2, -3, 0.3), width=12, height=12)
        s = random_surfels(rng, 15)
        perm = rng.permutation(15)
        a, b = rasterize(s, cam), rasterize(s.subset(perm), cam)
        for k in ("color", "alpha", "depth", "normal"):
            assert np.allclose(getattr(a, k), getattr(b, k), atol=1e-12)


class TestShading:
    def test_head_on_mirror(self):
        rd = np.array([0.0, 0.0, 1.0])
        assert np.allclose(reflect(rd, -rd), -rd)

    @given(st.integers(0, 10_000))
    def test_reflection_identities(self, seed):
        rng = np.random.default_rng(seed)
        rd = rng.normal(size=3)
        rd /= np.linalg.norm(rd)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        r = reflect(rd, n)
        assert np.linalg.norm(r) == pytest.approx(1)
        assert r @ n == pytest.approx(-(rd @ n))

    def test_constant_cubemap(self, rng):
        cam = Camera.look_at((0, -3, 0), width=10, height=10)
        alpha = rng.uniform(0, 1, (10, 10))
        normal = rng.normal(size=(10, 10, 3))
        spec, _ = shade_specular(alpha, normal, Cubemap.constant(0.7, 8), cam)
        on = alpha > 1e-3
        assert np.allclose(spec[on], 0.7) and np.allclose(spec[~on], 0)

    def test_cube_lookup_matches_scalar(self, rng):
        cm = random_texels(rng, 6)
        d = rng.normal(size=(200, 3))
        got = cm.sample(d)
        for i in range(len(d)):
            assert np.allclose(got[i], cube_lookup_scalar(cm.texels, d[i]), atol=1e-12)

    def test_face_directions_hit_their_texels(self):
        res = 5
        d = face_directions(res)
        face, u, v, _ = face_coords(d.reshape(-1, 3))
        f_idx, rows, cols = np.meshgrid(np.arange(6), np.arange(res), np.arange(res), indexing="ij")
        assert np.array_equal(face, f_idx.reshape(-1))
        assert np.allclose(u * res - 0.5, cols.reshape(-1)) and np.allclose(v * res - 0.5, rows.reshape(-1))

    def test_diffuse_only_normal_incidence_unpolarized(self):
        cam = frontal_camera()
        color = np.full((8, 8, 3), 0.5)
        alpha = np.ones((8, 8))
        rays = cam.camera_rays()
        normal = -rays / np.linalg.norm(rays, axis=-1, keepdims=True)
        spec, s0, s1, s2, _ = shade(color, alpha, normal, cam, Cubemap.constant(0.0, 4), 1.5)
        assert np.allclose(s1, 0, atol=1e-15) and np.allclose(s2, 0, atol=1e-15)
        assert np.allclose(s0, 0.5 * 0.96)

    def test_pure_specular_zero_azimuth(self):
        cam = frontal_camera()
        n = np.array([0.6, 0.0, -0.8])
        color = np.zeros((8, 8, 3))
        normal = np.broadcast_to(n, (8, 8, 3)).copy()
        spec, s0, s1, s2, _ = shade(color, np.ones((8, 8)), normal, cam, Cubemap.constant(1.0, 4), 1.5)
        rd = cam.camera_rays()[4, 4]
        rd /= np.linalg.norm(rd)
        f = polcore.fresnel(-(rd @ n), 1.5)
        assert np.allclose(s1[4, 4], f.r_minus) and np.allclose(s2[4, 4], 0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_fused_matches_scalar_and_array_paths(self, seed):
        rng = np.random.default_rng(seed)
        cam = Camera.look_at((0.4, -3, 0.7), width=9, height=7)
        color = rng.uniform(0, 1, (7, 9, 3))
        alpha = rng.uniform(0, 1, (7, 9))
        alpha[0, :3] = 0
        normal = rng.normal(size=(7, 9, 3)) * rng.uniform(0.2, 1.0, (7, 9, 1))
        normal[1, 1] = 0
        cm = random_texels(rng, 5)
        spec, s0, s1, s2, _ = shade(color, alpha, normal, cam, cm, 1.5)
        ref = shade_scalar(color, alpha, normal, cam, cm.texels, 1.5)
        for a, b in zip((spec, s0, s1, s2), ref):
            assert np.allclose(a, b, atol=1e-12)
        sp, _ = shade_specular(alpha, normal, cm, cam)
        t0, t1, t2, _ = stokes_compose(color, sp, alpha, normal, cam, 1.5)
        for a, b in zip((s0, s1, s2), (t0, t1, t2)):
            assert np.allclose(a, b, atol=1e-12)

    def test_mixed_pixel_matches_polcore(self, rng):
        cam = Camera.look_at((0.4, -3, 0.7), width=6, height=6)
        color = rng.uniform(0, 1, (6, 6, 3))
        normal = np.tile(np.array([0.3, -0.4, -0.85]), (6, 6, 1))
        cm = random_texels(rng)
        spec, s0, s1, s2, _ = shade(color, np.ones((6, 6)), normal, cam, cm, 1.5)
        y, x = 2, 3
        n = normal[y, x] / np.linalg.norm(normal[y, x])
        rd = cam.camera_rays()[y, x]
        rd /= np.linalg.norm(rd)
        f = polcore.fresnel(-(rd @ n), 1.5)
        ref = polcore.pbrdf_stokes(color[y, x], spec[y, x], math.atan2(n[1], n[0]), f)
        assert np.allclose(ref[0], s0[y, x]) and np.allclose(ref[1], s1[y, x]) and np.allclose(ref[2], s2[y, x])


class TestBackward:
    def scene(self, seed, n=50, size=16):
        rng = np.random.default_rng(seed)
        cam = Camera.look_at([0.3, -3, 0.5], width=size, height=size, fov_deg=50)
        return rng, cam, random_surfels(rng, n, spread=0.7, scale=(0.08, 0.25)), random_texels(rng)

    def test_zero_upstream_gives_zero(self):
        rng, cam, s, cm = self.scene(0, n=10)
        b = render(s, cam, cm)
        g, gt = backward(b, s, cm)
        assert all(not np.any(v) for v in g.values()) and not np.any(gt)

    def test_single_surfel_colour_gradient_is_weight(self):
        cam = frontal_camera(size=8)
        s = SurfelSet.from_values([[0.1, 0, 4]], [[0.8, 0.5]], [[1, 0, 0, 0]], [0.7], [[0.2, 0.5, 0.9]])
        b = rasterize(s, cam)
        g, _ = backward(b, s, None, color=np.ones((8, 8, 3)))
        weight = b.alpha.sum()
        assert np.allclose(g["f_dc"][0], 0.28209479177387814 * weight)
        h = 1e-4
        fd = []
        for c in range(3):
            sp, sm = s.copy(), s.copy()
            sp.f_dc[0, c] += h
            sm.f_dc[0, c] -= h
            fd.append((rasterize(sp, cam).color.sum() - rasterize(sm, cam).color.sum()) / (2 * h))
        assert np.allclose(g["f_dc"][0], fd, rtol=1e-4)

    def test_all_buffers_finite_differences(self):
        rng, cam, s, cm = self.scene(1, n=20, size=12)
        W = {k: rng.normal(size=(12, 12, 3)) for k in ("s0", "s1", "s2", "normal")}
        W["alpha"], W["depth"] = rng.normal(size=(12, 12)), rng.normal(size=(12, 12))

        def f():
            b = render(s, cam, cm)
            return sum(np.sum(W[k] * getattr(b, k)) for k in W), b

        _, b = f()
        g, gt = backward(b, s, cm, **W)
        g["texels"] = gt
        params = {k: getattr(s, k) for k in SurfelSet.PARAMS}
        params["texels"] = cm.texels
        h = 1e-6
        for k, a in params.items():
            idx = list(np.ndindex(a.shape))
            pick = [idx[i] for i in rng.choice(len(idx), min(40, len(idx)), replace=False)]
            fd = np.zeros(len(pick))
            for j, i in enumerate(pick):
                old = a[i]
                a[i] = old + h
                lp, _ = f()
                a[i] = old - h
                lm, _ = f()
                a[i] = old
                fd[j] = (lp - lm) / (2 * h)
            an = np.array([g[k][i] for i in pick])
            assert np.linalg.norm(an - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8), k
