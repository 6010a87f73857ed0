import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from polsurfel import synth
from polsurfel.surfel import Camera, SurfelSet

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def random_surfels(rng, n, spread=0.6, scale=(0.05, 0.3)):
    q = rng.normal(size=(n, 4))
    return SurfelSet(rng.uniform(-spread, spread, (n, 3)),
                     np.log(rng.uniform(*scale, (n, 2))), q / np.linalg.norm(q, axis=1, keepdims=True),
                     rng.normal(size=n), rng.normal(size=(n, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return Camera.look_at((0.4, -3.0, 0.8), width=16, height=16, fov_deg=40)


@pytest.fixture(scope="session")
def sphere_dataset():
    return synth.generate("sphere", n_views=6, resolution=48, seed=3)


@pytest.fixture(scope="session")
def two_sphere_dataset():
    return synth.generate("two_spheres", n_views=6, resolution=64, seed=5)
