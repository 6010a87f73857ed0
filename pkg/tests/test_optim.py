import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_surfels
from polsurfel import optim, render
from polsurfel.optim import Adam, LearningRates, TrainConfig, Trainer
from polsurfel.render.cubemap import Cubemap
from polsurfel.surfel import logit

ZERO_LR = dict(position=0.0, position_final=0.0, color=0.0, opacity=0.0, scaling=0.0, rotation=0.0, cubemap=0.0)


def tiny(**kw):
    base = dict(iterations=30, warmup_iters=10, n_init=300, min_surfels=10, densify_from=5, densify_until=20,
                densify_interval=5, opacity_reset_interval=0, cubemap_res=8, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


def same_state(a, b):
    for k in a.surfels.PARAMS:
        if not np.array_equal(getattr(a.surfels, k), getattr(b.surfels, k)):
            return False
    return np.array_equal(a.cubemap.texels, b.cubemap.texels)


class TestAdam:
    def test_scalar_oracle(self):
        x = np.array([1.0, -2.0])
        opt = Adam({"p": x})
        m = v = np.zeros(2)
        ref = x.copy()
        for t, g in enumerate(([0.5, -1.0], [0.2, 0.3], [-0.4, 0.1]), 1):
            g = np.array(g)
            opt.step({"p": x}, {"p": g}, {"p": 0.1})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-15)
            np.testing.assert_allclose(x, ref, rtol=1e-14)

    def test_first_step_is_sign(self):
        x = np.zeros(3)
        Adam({"p": x}).step({"p": x}, {"p": np.array([3.0, -0.01, 2.0])}, {"p": 0.5})
        np.testing.assert_allclose(x, [-0.5, 0.5, -0.5])

    def test_remap_zeroes_new_rows(self):
        p = {"xyz": np.ones((3, 3))}
        opt = Adam(p)
        opt.step(p, {"xyz": np.ones((3, 3))}, {"xyz": 0.1})
        opt.remap(np.array([0, 2, 2]), np.array([False, False, True]), keys=("xyz",))
        assert opt.m["xyz"].shape == (3, 3)
        assert np.all(opt.m["xyz"][:2] > 0) and np.all(opt.m["xyz"][2] == 0)


class TestSchedule:
    def test_position_decay(self):
        lr = LearningRates()
        assert lr.at(0, 100)["xyz"] == pytest.approx(1.6e-4)
        assert lr.at(100, 100)["xyz"] == pytest.approx(1.6e-6)
        assert lr.at(50, 100)["xyz"] == pytest.approx(1.6e-5)
        assert lr.at(50, 100)["f_dc"] == lr.color

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(iterations=10, warmup_iters=10)
        with pytest.raises(ValueError):
            TrainConfig(tau=0)
        with pytest.raises(ValueError):
            TrainConfig(lr={"position": -1})
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"bogus": 1})
        c = TrainConfig(seed=3, lr={"color": 0.1})
        assert TrainConfig.from_dict(c.to_dict()) == c


class TestDensify:
    def test_identity_without_candidates(self, rng):
        s = random_surfels(rng, 20, scale=(0.01, 0.1))
        s.opacity_logit[:] = 2.0
        res = optim.densify_prune(s, np.zeros(20), rng)
        assert res.identity and not res.degenerate
        assert np.array_equal(res.surfels.xyz, s.xyz)

    def test_all_transparent_is_degenerate(self, rng):
        s = random_surfels(rng, 10)
        s.opacity_logit[:] = -50
        res = optim.densify_prune(s, np.ones(10), rng)
        assert res.degenerate and len(res.surfels) == 0

    def test_clone_and_prune(self, rng):
        s = random_surfels(rng, 6, scale=(0.01, 0.1))
        s.opacity_logit[:] = 2.0
        s.opacity_logit[1] = float(logit(0.001))
        g = np.array([1.0, 0, 1e-3, 0, 0, 0])
        res = optim.densify_prune(s, g, rng, grad_threshold=2e-4, min_count=0)
        assert len(res.surfels) == 7
        assert 1 not in res.src
        assert sorted(res.src[res.is_new]) == [0, 2]

    def test_bounds(self, rng):
        s = random_surfels(rng, 10, scale=(0.01, 0.1))
        s.opacity_logit[:] = 2.0
        res = optim.densify_prune(s, np.ones(10), rng, max_count=13)
        assert len(res.surfels) == 13
        s.opacity_logit[:5] = -20
        res = optim.densify_prune(s, np.zeros(10), rng, min_count=8)
        assert len(res.surfels) == 8


class TestTrainer:
    def test_zero_learning_rate_is_identity(self, sphere_dataset):
        cfg = tiny(lr=ZERO_LR, densify_interval=0, iterations=6, warmup_iters=2)
        tr = Trainer(sphere_dataset.views, cfg)
        before = tr.surfels.copy(), tr.cubemap.texels.copy()
        tr.run()
        for k in before[0].PARAMS:
            np.testing.assert_allclose(getattr(tr.surfels, k), getattr(before[0], k), atol=1e-15)
        assert np.array_equal(tr.cubemap.texels, before[1])

    def test_determinism_and_invariants(self, sphere_dataset):
        cfg = tiny(max_surfels=400)
        a = Trainer(sphere_dataset.views, cfg)
        ra = a.run()
        b = Trainer(sphere_dataset.views, cfg)
        rb = b.run()
        assert same_state(a, b)
        assert ra.log_csv() == rb.log_csv()
        assert all(np.isfinite(r["total"]) for r in ra.log)
        assert np.max(np.abs(np.linalg.norm(a.surfels.quat, axis=1) - 1)) < 1e-6
        counts = [s["surfels"] for s in ra.stats]
        assert min(counts) >= cfg.min_surfels and max(counts) <= cfg.max_surfels
        c = Trainer(sphere_dataset.views, tiny(max_surfels=400, seed=1))
        c.run()
        assert not same_state(a, c)

    def test_checkpoint_resume(self, sphere_dataset, tmp_path):
        cfg = tiny(iterations=24, checkpoint_every=12)
        full = Trainer(sphere_dataset.views, cfg, out_dir=tmp_path)
        res = full.run()
        resumed = Trainer.from_checkpoint(tmp_path / "ckpt_000012", sphere_dataset.views, out_dir=tmp_path / "r")
        assert resumed.iteration == 12
        res2 = resumed.run()
        assert same_state(full, resumed)
        assert res.log_csv() == res2.log_csv()

    def test_non_finite_target_raises(self, sphere_dataset, tmp_path):
        views = [dataclasses.replace(v, s0=np.full_like(v.s0, np.nan)) for v in sphere_dataset.views[:3]]
        with pytest.raises(optim.NonFiniteLossError) as e:
            Trainer(views, tiny(), out_dir=tmp_path).step()
        assert e.value.dump is not None and e.value.dump.is_file()

    def test_needs_two_views(self, sphere_dataset):
        with pytest.raises(ValueError):
            Trainer(sphere_dataset.views[:1], tiny())


class TestWarmup:
    @settings(max_examples=6)
    @given(st.integers(1, 50))
    def test_boundary(self, sphere_dataset, warm):
        cfg = tiny(warmup_iters=warm, iterations=100, tsc_use_dominance=True)
        s = optim.initial_surfels(300, np.random.default_rng(0), opacity=0.5)
        cm = Cubemap.constant(0.5, 8)
        views = sphere_dataset.views
        caches = {}
        for j in range(len(views)):
            b = render.rasterize(s, views[j].camera)
            caches[j] = (b.depth, b.alpha)
        nb = optim.neighbor_views([v.camera for v in views], 4)
        mk = lambda buf: optim.build_tsc_batch(0, buf.depth, buf.alpha, views, nb[0], caches, cfg)
        before = optim.objective(s, cm, views[0], cfg, warm - 1, make_batch=mk)
        at = optim.objective(s, cm, views[0], cfg, warm, make_batch=mk)
        assert before.losses["l_pol"] == 0 and before.losses["l_tsc"] == 0 and "texels" not in before.grads
        assert at.losses["l_pol"] > 0 and at.losses["l_tsc"] > 0 and "texels" in at.grads
        assert before.losses["l_rgb"] > 0 and at.losses["l_rgb"] > 0


def test_neighbor_views():
    from polsurfel.surfel import Camera
    cams = [Camera.look_at((3 * np.cos(a), 3 * np.sin(a), 0)) for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
    nb = optim.neighbor_views(cams, 2)
    assert sorted(nb[0]) == [1, 7]
    assert all(i not in row for i, row in enumerate(nb))
    assert len(optim.neighbor_views(cams[:2], 4)[0]) == 1


def test_initial_surfels_in_ball(rng):
    s = optim.initial_surfels(500, rng, radius=0.8, opacity=0.1)
    assert np.all(np.linalg.norm(s.xyz, axis=1) <= 0.8)
    np.testing.assert_allclose(s.opacity, 0.1)
    assert np.all(s.log_scale[:, 0] == s.log_scale[:, 1])


def test_opacity_reset_option(sphere_dataset):
    tr = Trainer(sphere_dataset.views, tiny(opacity_reset_interval=4, densify_interval=0, init_opacity=0.5))
    for _ in range(4):
        tr.step()
    assert tr.surfels.opacity.max() <= 0.01 + 1e-12
    assert not tr.adam.m["opacity_logit"].any()
    assert TrainConfig().opacity_reset_interval == 0
