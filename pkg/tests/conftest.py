import numpy as np
import pytest

from splatroom.scene import Camera, GaussianScene, SeedConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def simple_camera():
    """100px-focal camera at the origin looking +z."""
    K = np.array([[100.0, 0, 3.5], [0, 100.0, 3.5], [0, 0, 1.0]])
    return Camera(K=K, R_wc=np.eye(3), t_wc=np.zeros(3), width=8, height=8)


def make_random_scene(rng, n_seeds=4, k=2, depth=(2.5, 5.0), opacity=(-1.5, 1.8)):
    scene = GaussianScene(SeedConfig(surfels_per_seed=k))
    anchors = np.stack([
        rng.uniform(-1.2, 1.2, n_seeds),
        rng.uniform(-1.2, 1.2, n_seeds),
        rng.uniform(*depth, n_seeds),
    ], axis=1)
    scene.add_seeds(anchors, 0, 0.4, rng)
    m = scene.n_surfels
    scene.quat[:] = rng.normal(size=(m, 4))
    scene.normalize_rotations()
    scene.log_scale[:] = np.log(rng.uniform(0.25, 0.7, (m, 2)))
    scene.raw_opacity[:] = rng.uniform(*opacity, m)
    scene.raw_color[:] = rng.uniform(-1.2, 1.2, (m, 3))
    return scene


@pytest.fixture
def random_scene(rng):
    return make_random_scene(rng)
