import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polsurfel import surfel
from polsurfel.surfel import Camera, CameraView, SurfelSet, axis_angle_quat, covariance_world, project

quats = st.tuples(*(st.floats(-1, 1) for _ in range(4))).filter(lambda q: np.linalg.norm(q) > 0.1)
scales = st.tuples(st.floats(0.01, 2.0), st.floats(0.01, 2.0))


def one(q, s, xyz=(0, 0, 0), opacity=0.5):
    return SurfelSet.from_values(np.array([xyz]), np.array([s]), np.array([q]), np.array([opacity]),
                                 np.array([[0.2, 0.4, 0.6]]))


def rotmat_oracle(q):
    """Rotation matrix by conjugating basis vectors with quaternion products."""
    q = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)

    def mul(a, b):
        w1, x1, y1, z1 = a
        w2, x2, y2, z2 = b
        return np.array([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2, w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                         w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2, w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2])
    conj = q * np.array([1, -1, -1, -1])
    return np.stack([mul(mul(q, np.r_[0, e]), conj)[1:] for e in np.eye(3)], axis=1)


def simple_camera(focal=100.0, size=100):
    return Camera(focal, focal, size / 2, size / 2, size, size, np.eye(3), np.zeros(3))


class TestCovariance:
    def test_identity(self):
        assert np.allclose(covariance_world(one([1, 0, 0, 0], [1, 1]))[0], np.diag([1, 1, 0]))

    def test_rotated_about_x(self):
        cov = covariance_world(one(axis_angle_quat([1, 0, 0], math.pi / 2), [1, 2]))[0]
        w, v = np.linalg.eigh(cov)
        assert np.allclose(w, [0, 1, 4], atol=1e-12)
        assert abs(abs(v[:, 0] @ np.array([0, -1, 0]))) == pytest.approx(1, abs=1e-12)

    @given(quats, scales)
    def test_matches_matrix_product_and_spectrum(self, q, s):
        g = one(q, s)
        R = rotmat_oracle(q)
        D = np.diag([s[0] ** 2, s[1] ** 2, 0.0])
        cov = covariance_world(g)[0]
        assert np.allclose(cov, R @ D @ R.T, atol=1e-9)
        assert np.allclose(cov, cov.T)
        assert np.allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort([s[0] ** 2, s[1] ** 2, 0]), atol=1e-9)

    @given(quats, scales)
    def test_sign_flip_invariance(self, q, s):
        assert np.allclose(covariance_world(one(q, s)), covariance_world(one(-np.asarray(q), s)), atol=1e-12)


class TestNormal:
    def test_examples(self):
        assert np.allclose(one([1, 0, 0, 0], [1, 1]).normal[0], [0, 0, 1])
        assert np.allclose(one(axis_angle_quat([1, 0, 0], math.pi), [1, 1]).normal[0], [0, 0, -1], atol=1e-12)

    @given(quats)
    def test_null_space(self, q):
        g = one(q, [0.5, 0.7])
        n = surfel.surfel_normal(g)[0]
        assert np.linalg.norm(n) == pytest.approx(1)
        w, v = np.linalg.eigh(covariance_world(g)[0])
        assert abs(v[:, 0] @ n) == pytest.approx(1, abs=1e-9)


class TestProject:
    def test_centre_projection(self):
        g = one([1, 0, 0, 0], [0.3, 0.3], xyz=(0, 0, 5))
        ps = surfel.project_one(g, 0, simple_camera())
        assert np.allclose(ps.u, [50, 50]) and ps.depth_at_mean == pytest.approx(5)
        assert np.allclose(ps.depth_gradient, 0)
        assert np.allclose(ps.cov2d, ps.cov2d.T) and np.all(np.linalg.eigvalsh(ps.cov2d) > 0)

    def test_behind_camera_culled(self):
        assert surfel.project_one(one([1, 0, 0, 0], [0.3, 0.3], xyz=(0, 0, -2)), 0, simple_camera()) is None

    def test_outside_image_culled(self):
        assert surfel.project_one(one([1, 0, 0, 0], [0.01, 0.01], xyz=(30, 0, 5)), 0, simple_camera()) is None

    def ray_plane_depth(self, g, cam, uv):
        n = g.normal[0] @ cam.R.T
        p = cam.world_to_camera(g.xyz[0])
        ray = cam.camera_rays(np.asarray(uv, dtype=np.float64))
        return (n @ p) / (ray @ n)

    def test_tilted_depth_within_one_percent(self):
        g = one(axis_angle_quat([1, 0, 0], math.pi / 4), [0.4, 0.4], xyz=(0.2, -0.1, 4))
        cam = simple_camera()
        pr = project(g, cam)
        sig = np.sqrt(np.diag(pr.cov2d[0]))
        for dx in np.linspace(-1, 1, 5):
            for dy in np.linspace(-1, 1, 5):
                d = np.array([dx * sig[0], dy * sig[1]])
                taylor = pr.depth[0] + pr.depth_grad[0] @ d
                exact = self.ray_plane_depth(g, cam, pr.u[0] + d)
                assert abs(taylor - exact) / exact < 0.01

    def test_taylor_error_is_quadratic(self):
        g = one(axis_angle_quat([1, 1, 0], 0.9), [0.4, 0.4], xyz=(0.3, 0.2, 4))
        cam = simple_camera()
        pr = project(g, cam)
        errs = []
        for h in (8.0, 4.0, 2.0, 1.0):
            d = np.array([h, 0.6 * h])
            errs.append(abs(pr.depth[0] + pr.depth_grad[0] @ d - self.ray_plane_depth(g, cam, pr.u[0] + d)))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(np.abs(ratios - 4) < 0.3)

    def test_closed_form_matches_jpr_form(self, rng):
        cam = Camera.look_at((1, -3, 1), width=64, height=64)
        q = rng.normal(size=4)
        g = one(q, [0.3, 0.2], xyz=(0.1, 0.2, -0.1))
        pr = project(g, cam)
        uv = pr.u[0] + np.array([2.0, -1.5])
        assert surfel.taylor_depth_jpr(g, 0, cam, uv) == pytest.approx(pr.depth[0] + pr.depth_grad[0] @ (uv - pr.u[0]))

    @given(st.integers(0, 10_000))
    def test_rigid_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        cam = Camera.look_at(rng.normal(size=3) * 0.3 + [0, -4, 0], width=64, height=64)
        q = rng.normal(size=(3, 4))
        g = SurfelSet(rng.uniform(-0.5, 0.5, (3, 3)), np.log(rng.uniform(0.05, 0.3, (3, 2))), q,
                      rng.normal(size=3), rng.normal(size=(3, 3)))
        Q = surfel.quat_to_rotmat(rng.normal(size=(1, 4)))[0]
        t = rng.normal(size=3)
        g2 = g.copy()
        g2.xyz = g.xyz @ Q.T + t
        qr = rotmat_to_quat(Q)
        g2.quat = np.array([quat_mul(qr, qq / np.linalg.norm(qq)) for qq in q])
        cam2 = Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.R @ Q.T, Q @ cam.center + t)
        a, b = project(g, cam), project(g2, cam2)
        for k in ("u", "cov2d", "depth", "depth_grad", "normal"):
            assert np.allclose(getattr(a, k), getattr(b, k), atol=1e-6)


def quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2, w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2, w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2])


def rotmat_to_quat(R):
    w = math.sqrt(max(0.0, 1 + np.trace(R))) / 2
    if w > 1e-3:
        return np.array([w, (R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w), (R[1, 0] - R[0, 1]) / (4 * w)])
    i = int(np.argmax(np.diag(R)))
    j, k = (i + 1) % 3, (i + 2) % 3
    v = np.zeros(4)
    v[i + 1] = math.sqrt(max(0.0, 1 + R[i, i] - R[j, j] - R[k, k])) / 2
    v[0] = (R[k, j] - R[j, k]) / (4 * v[i + 1])
    v[j + 1] = (R[j, i] + R[i, j]) / (4 * v[i + 1])
    v[k + 1] = (R[k, i] + R[i, k]) / (4 * v[i + 1])
    return v


class TestParameterization:
    def test_rotmat_matches_oracle(self, rng):
        for q in rng.normal(size=(20, 4)):
            assert np.allclose(surfel.quat_to_rotmat(q[None])[0], rotmat_oracle(q), atol=1e-12)

    @given(st.floats(-30, 30))
    def test_opacity_in_unit_interval(self, x):
        o = surfel.sigmoid(np.array([x]))[0]
        assert 0 <= o <= 1

    def test_from_values_round_trip(self):
        g = one([1, 0, 0, 0], [0.2, 0.3], opacity=0.25)
        assert np.allclose(g.scale, [[0.2, 0.3]]) and g.opacity[0] == pytest.approx(0.25)
        assert np.allclose(g.color, [[0.2, 0.4, 0.6]])


class TestCamera:
    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValueError):
            Camera(1, 1, 0, 0, 4, 4, np.diag([1, 2, 1]), np.zeros(3))

    def test_look_at_orthonormal_and_centred(self):
        cam = Camera.look_at((2, -3, 1), width=32, height=24)
        assert np.allclose(cam.R @ cam.R.T, np.eye(3), atol=1e-12)
        uv, z = cam.project_points(np.zeros((1, 3)))
        assert np.allclose(uv[0], [16, 12]) and z[0] == pytest.approx(np.sqrt(14))

    def test_mask_shape_checked(self):
        with pytest.raises(ValueError):
            CameraView(Camera.look_at((0, -3, 0), width=8, height=8), mask=np.zeros((4, 4), bool))

    def test_dict_round_trip(self):
        cam = Camera.look_at((2, -3, 1), width=32, height=24)
        back = Camera.from_dict(cam.to_dict())
        assert np.array_equal(back.R, cam.R) and back.fx == cam.fx and back.width == 32
