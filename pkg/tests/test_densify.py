import numpy as np
import pytest

from conftest import make_random_scene
from splatroom.densify import DensifyConfig, grow_seeds, prune_seeds
from splatroom.scene import SeedConfig


@pytest.fixture
def cfg():
    return DensifyConfig()


def prepared_scene(rng, n_seeds=8, k=3, voxel=0.4):
    scene = make_random_scene(rng, n_seeds=n_seeds, k=k)
    scene.config = SeedConfig(voxel_size=voxel, surfels_per_seed=k)
    return scene


class TestGrow:
    def test_zero_gradients_grow_nothing(self, rng, cfg):
        scene = prepared_scene(rng)
        scene.grad_count[:] = cfg.grow_interval
        assert grow_seeds(scene, cfg, 1600, rng) == 0

    def test_single_candidate_voxel(self, rng, cfg):
        scene = prepared_scene(rng, n_seeds=1, k=3)
        scene.offset[:] = 0.001  # all surfels in one fine voxel
        scene.grad_count[:] = cfg.grow_interval
        scene.grad_accum[:] = 10 * cfg.grow_threshold * cfg.grow_interval
        n0 = scene.n_seeds
        created = grow_seeds(scene, cfg, 1600, rng)
        assert created == 1
        assert scene.n_seeds == n0 + 1
        assert scene.level[-1] == 1
        # anchor is the level-1 voxel center of the surfel centers
        voxel = scene.config.voxel_size / 2
        key = np.floor((scene.anchor[0] + 0.001) / voxel)
        np.testing.assert_allclose(scene.anchor[-1], key * voxel + voxel / 2)

    def test_threshold_doubles_per_level(self, rng, cfg):
        scene = prepared_scene(rng, n_seeds=2, k=2)
        scene.level[:] = 1
        scene.grad_count[:] = cfg.grow_interval
        # mean gradient above the base threshold but below theta * 2^1
        scene.grad_accum[:] = 1.5 * cfg.grow_threshold * cfg.grow_interval
        assert grow_seeds(scene, cfg, 1600, rng) == 0
        scene.grad_count[:] = cfg.grow_interval
        scene.grad_accum[:] = 2.5 * cfg.grow_threshold * cfg.grow_interval
        assert grow_seeds(scene, cfg, 1600, rng) > 0

    def test_max_level_not_exceeded(self, rng, cfg):
        scene = prepared_scene(rng, n_seeds=2, k=2)
        scene.level[:] = cfg.max_level
        scene.grad_count[:] = cfg.grow_interval
        scene.grad_accum[:] = 100 * cfg.grow_threshold * cfg.grow_interval
        assert grow_seeds(scene, cfg, 1600, rng) == 0

    def test_outside_window_is_noop(self, rng, cfg):
        scene = prepared_scene(rng)
        scene.grad_count[:] = cfg.grow_interval
        scene.grad_accum[:] = 100 * cfg.grow_threshold * cfg.grow_interval
        assert grow_seeds(scene, cfg, 100, rng) == 0
        assert grow_seeds(scene, cfg, 20000, rng) == 0

    def test_no_duplicate_level_keys(self, rng, cfg):
        scene = prepared_scene(rng, n_seeds=10, k=3)
        scene.offset[:] = rng.uniform(-0.2, 0.2, scene.offset.shape)
        scene.grad_count[:] = cfg.grow_interval
        scene.grad_accum[:] = rng.uniform(0, 4 * cfg.grow_threshold * cfg.grow_interval,
                                          scene.n_seeds)
        grow_seeds(scene, cfg, 1600, rng)
        grow_seeds(scene, cfg, 1700, rng)
        keys = set()
        for lvl, anchor in zip(scene.level, scene.anchor):
            voxel = scene.config.voxel_size / 2 ** lvl
            key = (int(lvl),) + tuple(int(np.floor(a / voxel)) for a in anchor)
            assert key not in keys
            keys.add(key)
        scene.check_integrity()

    def test_accumulators_reset_after_processing(self, rng, cfg):
        scene = prepared_scene(rng)
        scene.grad_count[:] = cfg.grow_interval
        scene.grad_accum[:] = 10 * cfg.grow_threshold * cfg.grow_interval
        n0 = scene.n_seeds
        grow_seeds(scene, cfg, 1600, rng)
        assert np.all(scene.grad_accum[:n0] == 0)
        assert np.all(scene.grad_count[:n0] == 0)


class TestPrune:
    def test_healthy_seeds_survive(self, rng, cfg):
        scene = prepared_scene(rng)
        scene.opacity_accum[:] = 0.99 * cfg.prune_interval * scene.k
        assert prune_seeds(scene, cfg, 1600) == 0

    def test_zero_opacity_seed_pruned(self, rng, cfg):
        scene = prepared_scene(rng, n_seeds=4)
        scene.opacity_accum[:] = 0.9 * cfg.prune_interval * scene.k
        scene.opacity_accum[2] = 0.0
        victim = int(scene.seed_uid[2])
        assert prune_seeds(scene, cfg, 1600) == 1
        assert victim not in set(int(u) for u in scene.seed_uid)
        scene.check_integrity()

    def test_threshold_rule_matches_replay(self, rng, cfg):
        scene = prepared_scene(rng, n_seeds=12)
        scene.opacity_accum[:] = rng.uniform(
            0, 1.3 * cfg.prune_opacity * cfg.prune_interval * scene.k, 12)
        mean_op = scene.opacity_accum / (cfg.prune_interval * scene.k)
        expected = {int(u) for u, m in zip(scene.seed_uid, mean_op)
                    if m < cfg.prune_opacity}
        before = {int(u) for u in scene.seed_uid}
        n = prune_seeds(scene, cfg, 1600)
        assert before - {int(u) for u in scene.seed_uid} == expected
        assert n == len(expected)

    def test_never_empties_the_scene(self, rng, cfg, caplog):
        scene = prepared_scene(rng, n_seeds=3)
        scene.opacity_accum[:] = (0.01, 0.03, 0.02)
        with caplog.at_level("WARNING"):
            n = prune_seeds(scene, cfg, 1600)
        assert n == 2
        assert scene.n_seeds == 1
        np.testing.assert_allclose(scene.opacity_accum, 0.0)  # survivors reset
        assert "empty" in caplog.text

    def test_young_seeds_not_pruned(self, rng, cfg):
        scene = prepared_scene(rng, n_seeds=3)
        scene.opacity_accum[:] = 0.0
        scene.created_iter[:] = (0, 1550, 0)  # middle seed mid-window
        n = prune_seeds(scene, cfg, 1600)
        assert n == 2
        assert scene.n_seeds == 1

    def test_counts_monotone(self, rng, cfg):
        scene = prepared_scene(rng, n_seeds=6)
        scene.opacity_accum[:] = rng.uniform(0, cfg.prune_opacity * cfg.prune_interval
                                             * scene.k * 1.5, 6)
        before = scene.n_seeds
        prune_seeds(scene, cfg, 1600)
        assert scene.n_seeds <= before
        scene.grad_count[:] = cfg.grow_interval
        scene.grad_accum[:] = 10 * cfg.grow_threshold * cfg.grow_interval
        before = scene.n_seeds
        grow_seeds(scene, cfg, 1700, rng)
        assert scene.n_seeds >= before
