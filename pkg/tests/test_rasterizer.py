import numpy as np
import pytest

from conftest import make_random_scene
from splatroom.diagnostics import naive_render
from splatroom.rasterizer import (RasterConfig, build_splat_geometry,
                                  gaussian_weight, ray_splat_intersect, render)
from splatroom.scene import Camera, GaussianScene, SeedConfig


def single_splat_scene(center, quat=(1, 0, 0, 0), scales=(2.0, 2.0),
                       raw_opacity=10.0, color_raw=(40.0, -40.0, -40.0)):
    scene = GaussianScene(SeedConfig(surfels_per_seed=1))
    scene.add_seeds(np.array([center], dtype=float), 0, 0.1,
                    np.random.default_rng(0))
    scene.offset[:] = 0.0
    scene.quat[0] = quat
    scene.log_scale[0] = np.log(scales)
    scene.raw_opacity[0] = raw_opacity
    scene.raw_color[0] = color_raw
    return scene


class TestSplatGeometry:
    def test_identity_columns(self, simple_camera):
        geo = build_splat_geometry((0, 0, 0), (1, 0, 0, 0), (1.0, 1.0), simple_camera)
        np.testing.assert_array_equal(geo.H[:, 0], (1, 0, 0, 0))
        np.testing.assert_array_equal(geo.H[:, 1], (0, 1, 0, 0))
        np.testing.assert_array_equal(geo.H[:, 2], (0, 0, 0, 0))
        np.testing.assert_array_equal(geo.H[:, 3], (0, 0, 0, 1))

    def test_on_axis_projection(self):
        K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
        cam = Camera(K=K, R_wc=np.eye(3), t_wc=np.zeros(3), width=100, height=100)
        geo = build_splat_geometry((0, 0, 5.0), (1, 0, 0, 0), (1.0, 1.0), cam)
        np.testing.assert_allclose(
            [geo.M[0, 3] / geo.M[3, 3], geo.M[1, 3] / geo.M[3, 3]], (50, 50))

    def test_center_matches_pinhole(self, rng):
        for _ in range(50):
            center = rng.uniform(-1, 1, 3) + [0, 0, 4.0]
            cam = Camera(K=np.array([[80.0, 0, 8], [0, 70.0, 8], [0, 0, 1]]),
                         R_wc=np.eye(3), t_wc=rng.uniform(-0.1, 0.1, 3),
                         width=16, height=16)
            geo = build_splat_geometry(center, rng.normal(size=4),
                                       rng.uniform(0.1, 0.5, 2), cam)
            hom = geo.M @ np.array([0, 0, 1.0, 1.0])
            xy, z = cam.project(center)
            np.testing.assert_allclose(hom[:2] / hom[3], xy[0], atol=1e-9)
            np.testing.assert_allclose(hom[2], z[0], atol=1e-9)

    def test_behind_near_plane_is_culled(self, simple_camera):
        geo = build_splat_geometry((0, 0, -1.0), (1, 0, 0, 0), (0.1, 0.1),
                                   simple_camera)
        assert geo.culled


class TestRaySplatIntersect:
    def test_central_ray(self):
        K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
        cam = Camera(K=K, R_wc=np.eye(3), t_wc=np.zeros(3), width=100, height=100)
        geo = build_splat_geometry((0, 0, 5.0), (1, 0, 0, 0), (1.0, 1.0), cam)
        u, v, z = ray_splat_intersect(geo, (50.0, 50.0))
        np.testing.assert_allclose((u, v, z), (0.0, 0.0, 5.0), atol=1e-12)

    def test_one_tangent_unit_offset(self):
        # splat at (0,0,5) facing the camera; the point center + s_u*t_u = (1,0,5)
        # projects to pixel (fx/5 + cx, cy) = (70, 50)
        K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
        cam = Camera(K=K, R_wc=np.eye(3), t_wc=np.zeros(3), width=100, height=100)
        geo = build_splat_geometry((0, 0, 5.0), (1, 0, 0, 0), (1.0, 1.0), cam)
        u, v, z = ray_splat_intersect(geo, (70.0, 50.0))
        assert abs(u - 1.0) < 1e-6
        assert abs(v) < 1e-9
        np.testing.assert_allclose(z, 5.0)

    def test_depth_clip_misses(self):
        K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
        cam = Camera(K=K, R_wc=np.eye(3), t_wc=np.zeros(3), width=100, height=100)
        geo = build_splat_geometry((0, 0, 5.0), (1, 0, 0, 0), (1.0, 1.0), cam)
        assert ray_splat_intersect(geo, (50.0, 50.0), near=6.0, far=100.0) is None

    def test_parallel_ray_misses(self):
        # splat plane containing the central ray, built with exact-integer
        # geometry so the degenerate denominator is exactly zero
        from splatroom.rasterizer import SplatGeometry
        K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
        cam = Camera(K=K, R_wc=np.eye(3), t_wc=np.zeros(3), width=100, height=100)
        H = np.zeros((4, 4))
        H[:3, 0] = (0, 0, 1)   # t_u along the optical axis
        H[:3, 1] = (0, 1, 0)   # t_v vertical: plane is x = 0
        H[:3, 3] = (0, 0, 5)
        H[3, 3] = 1.0
        geo = SplatGeometry(H=H, M=cam.world_to_screen() @ H)
        assert ray_splat_intersect(geo, (50.0, 50.0)) is None


class TestGaussianWeight:
    def test_center_is_one(self):
        assert gaussian_weight(0.0, 0.0, 100.0, 0.3) == 1.0

    def test_unit_offsets(self):
        assert abs(gaussian_weight(1.0, 1.0, 1e9, 0.3) - np.exp(-1)) < 1e-15

    def test_lowpass_floor_dominates(self):
        # needle splat edge-on: object Gaussian is ~0, the screen-space floor
        # at 0.3 px from the center with sigma 0.3 gives exp(-1/2)
        w = gaussian_weight(50.0, 0.0, 0.3 ** 2, 0.3)
        assert w >= np.exp(-0.5) - 1e-12
        np.testing.assert_allclose(w, np.exp(-0.5))


class TestRender:
    def test_single_opaque_splat(self, simple_camera):
        scene = single_splat_scene((0, 0, 5.0))
        out = render(scene.snapshot(), simple_camera)
        np.testing.assert_allclose(out.color[3, 3], (1, 0, 0), atol=1e-3)
        np.testing.assert_allclose(out.depth[3, 3], 5.0)
        assert out.alpha[3, 3] >= 0.99
        np.testing.assert_allclose(out.normal[3, 3], (0, 0, -1))

    def test_two_stacked_splats(self, simple_camera):
        scene = GaussianScene(SeedConfig(surfels_per_seed=1))
        scene.add_seeds(np.array([[0, 0, 5.0], [0, 0, 6.0]]), 0, 0.1,
                        np.random.default_rng(0))
        scene.offset[:] = 0.0
        scene.quat[:] = (1, 0, 0, 0)
        scene.log_scale[:] = np.log(50.0)  # weight 1 across the pixel
        scene.raw_opacity[:] = (0.0, 40.0)  # front 0.5, back 1.0
        scene.raw_color[0] = (40.0, -40.0, -40.0)   # red
        scene.raw_color[1] = (-40.0, -40.0, 40.0)   # blue
        out = render(scene.snapshot(), simple_camera)
        np.testing.assert_allclose(out.color[3, 3], (0.5, 0.0, 0.5), atol=1e-6)
        np.testing.assert_allclose(out.alpha[3, 3], 1.0)

    def test_matches_naive_compositor(self, rng, simple_camera):
        scene = make_random_scene(rng, n_seeds=10, k=2)
        cfg = RasterConfig(transmittance_floor=0.0)
        fast = render(scene.snapshot(), simple_camera, cfg)
        ref = naive_render(scene.snapshot(), simple_camera, cfg)
        for name in ("color", "depth", "normal", "alpha"):
            np.testing.assert_allclose(getattr(fast, name), getattr(ref, name),
                                       atol=1e-6)

    def test_empty_scene_raises(self, simple_camera):
        scene = GaussianScene(SeedConfig(surfels_per_seed=1))
        with pytest.raises(ValueError, match="no active surfels"):
            render(scene.snapshot(), simple_camera)

    def test_nothing_in_frustum_gives_zero_alpha(self, simple_camera):
        scene = single_splat_scene((0, 0, -5.0))  # behind the camera
        out = render(scene.snapshot(), simple_camera)
        assert np.all(out.alpha == 0)
        assert np.all(out.normal == 0)

    def test_permutation_invariance(self, rng, simple_camera):
        scene = make_random_scene(rng, n_seeds=6, k=2)
        out1 = render(scene.snapshot(), simple_camera)
        # permute seeds (and their surfel blocks)
        perm = rng.permutation(scene.n_seeds)
        scene2 = GaussianScene(scene.config)
        k = scene.k
        rows = np.concatenate([np.arange(p * k, (p + 1) * k) for p in perm])
        scene2.seed_uid = scene.seed_uid[perm]
        scene2.anchor = scene.anchor[perm]
        scene2.level = scene.level[perm]
        scene2.created_iter = scene.created_iter[perm]
        scene2.grad_accum = scene.grad_accum[perm]
        scene2.grad_count = scene.grad_count[perm]
        scene2.opacity_accum = scene.opacity_accum[perm]
        scene2.surfel_uid = scene.surfel_uid[rows]
        scene2.offset = scene.offset[rows]
        scene2.quat = scene.quat[rows]
        scene2.log_scale = scene.log_scale[rows]
        scene2.raw_opacity = scene.raw_opacity[rows]
        scene2.raw_color = scene.raw_color[rows]
        scene2._rebuild_maps()
        out2 = render(scene2.snapshot(), simple_camera)
        for name in ("color", "depth", "normal", "alpha"):
            np.testing.assert_array_equal(getattr(out1, name), getattr(out2, name))

    def test_alpha_monotone_in_opacity(self, rng, simple_camera):
        scene = make_random_scene(rng, n_seeds=6, k=2)
        cfg = RasterConfig(transmittance_floor=0.0)
        base = render(scene.snapshot(), simple_camera, cfg).alpha
        for trial in range(5):
            i = int(rng.integers(0, scene.n_surfels))
            scene.raw_opacity[i] += 0.3
            bumped = render(scene.snapshot(), simple_camera, cfg).alpha
            assert np.all(bumped >= base - 1e-12)
            base = bumped

    def test_weight_sum_plus_final_T_is_one(self, rng, simple_camera):
        scene = make_random_scene(rng, n_seeds=8, k=2)
        cfg = RasterConfig(transmittance_floor=0.0)
        out, ctx = render(scene.snapshot(), simple_camera, cfg, return_context=True)
        np.testing.assert_allclose(ctx.weight_sum + ctx.final_T, 1.0, atol=1e-6)

    def test_normal_unit_where_alpha_valid(self, rng, simple_camera):
        scene = make_random_scene(rng, n_seeds=8, k=2, opacity=(1.0, 3.0))
        cfg = RasterConfig()
        out = render(scene.snapshot(), simple_camera, cfg)
        mask = out.alpha > cfg.alpha_valid_threshold
        if mask.any():
            norms = np.linalg.norm(out.normal[mask], axis=-1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-4)

    def test_early_exit_matches_floor_aware_reference(self, rng, simple_camera):
        scene = make_random_scene(rng, n_seeds=10, k=2, opacity=(1.5, 3.5))
        cfg = RasterConfig(transmittance_floor=1e-4)
        fast = render(scene.snapshot(), simple_camera, cfg)
        ref = naive_render(scene.snapshot(), simple_camera, cfg)
        for name in ("color", "depth", "normal", "alpha"):
            np.testing.assert_allclose(getattr(fast, name), getattr(ref, name),
                                       atol=1e-12)
