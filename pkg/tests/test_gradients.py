import numpy as np
import pytest

from conftest import make_random_scene
from splatroom.gradients import ParamGrads, accumulate_seed_stats, backward
from splatroom.rasterizer import RasterConfig, render
from splatroom.scene import sigmoid


def zero_grads(out):
    return {"color": np.zeros_like(out.color), "depth": np.zeros_like(out.depth),
            "normal": np.zeros_like(out.normal), "alpha": np.zeros_like(out.alpha)}


class TestBackward:
    def test_zero_output_grads_give_zero_param_grads(self, rng, simple_camera,
                                                     random_scene):
        snap = random_scene.snapshot()
        out, ctx = render(snap, simple_camera, return_context=True)
        g = backward(snap, simple_camera, out, zero_grads(out), context=ctx)
        assert g.flat_norm() == 0.0
        assert np.all(g.g_screen == 0)

    def test_single_splat_alpha_grad_is_hand_derivation(self, simple_camera):
        # loss = alpha at one pixel; d/d raw_opacity = sigmoid'(raw) * G
        from test_rasterizer import single_splat_scene
        scene = single_splat_scene((0.1, -0.05, 5.0), raw_opacity=0.3)
        snap = scene.snapshot()
        cfg = RasterConfig(transmittance_floor=0.0)
        out, ctx = render(snap, simple_camera, cfg, return_context=True)
        grads_out = zero_grads(out)
        grads_out["alpha"][4, 4] = 1.0
        g = backward(snap, simple_camera, out, grads_out, cfg, context=ctx)
        pix = 4 * 8 + 4
        sel = ctx.pair_pixel == pix
        assert sel.sum() == 1
        G = float(ctx.pair_G[sel][0])
        a = sigmoid(0.3)
        np.testing.assert_allclose(g.raw_opacity[0], a * (1 - a) * G, rtol=1e-12)

    def test_matches_finite_differences(self, simple_camera):
        # dedicated randomized probes live in the diagnostics suite; this is
        # a fast spot check on one scene
        rng = np.random.default_rng(5)
        scene = make_random_scene(rng, n_seeds=3, k=2)
        cfg = RasterConfig(transmittance_floor=0.0)
        snap = scene.snapshot()
        out, ctx = render(snap, simple_camera, cfg, return_context=True)
        a = rng.uniform(0.2, 1.0, out.color.shape)
        grads_out = zero_grads(out)
        grads_out["color"] = 2 * a * out.color
        g = backward(snap, simple_camera, out, grads_out, cfg, context=ctx)

        def loss():
            o = render(scene.snapshot(), simple_camera, cfg)
            return np.sum(a * o.color ** 2)

        h = 1e-4
        checked = 0
        for arr, ga in ((scene.offset, g.offset), (scene.log_scale, g.log_scale),
                        (scene.raw_color, g.raw_color)):
            for i in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    orig = arr[i, j]
                    arr[i, j] = orig + h
                    lp = loss()
                    arr[i, j] = orig - h
                    lm = loss()
                    arr[i, j] = orig
                    fd = (lp - lm) / (2 * h)
                    if abs(fd - ga[i, j]) > 1e-6:
                        assert abs(fd - ga[i, j]) <= 1e-3 * max(abs(fd), abs(ga[i, j]))
                    checked += 1
        assert checked >= 40

    def test_backward_is_linear_in_output_grads(self, rng, simple_camera,
                                                random_scene):
        snap = random_scene.snapshot()
        cfg = RasterConfig(transmittance_floor=0.0)
        out, ctx = render(snap, simple_camera, cfg, return_context=True)
        ga = {k: rng.normal(size=v.shape) for k, v in zero_grads(out).items()}
        gb = {k: rng.normal(size=v.shape) for k, v in zero_grads(out).items()}
        gsum = {k: ga[k] + gb[k] for k in ga}
        ra = backward(snap, simple_camera, out, ga, cfg, context=ctx)
        rb = backward(snap, simple_camera, out, gb, cfg, context=ctx)
        rs = backward(snap, simple_camera, out, gsum, cfg, context=ctx)
        np.testing.assert_allclose(rs.offset, ra.offset + rb.offset, atol=1e-9)
        np.testing.assert_allclose(rs.raw_opacity, ra.raw_opacity + rb.raw_opacity,
                                   atol=1e-9)
        np.testing.assert_allclose(rs.rotation, ra.rotation + rb.rotation, atol=1e-9)

    def test_quaternion_grads_tangent(self, rng, simple_camera, random_scene):
        snap = random_scene.snapshot()
        out, ctx = render(snap, simple_camera, return_context=True)
        ga = {k: rng.normal(size=v.shape) for k, v in zero_grads(out).items()}
        g = backward(snap, simple_camera, out, ga, context=ctx)
        q = snap.quat / np.linalg.norm(snap.quat, axis=1, keepdims=True)
        dots = np.abs(np.sum(q * g.rotation, axis=1))
        assert np.all(dots <= 1e-9 * (1 + np.linalg.norm(g.rotation, axis=1)))

    def test_culled_surfels_get_zero_grads(self, rng, simple_camera):
        scene = make_random_scene(rng, n_seeds=2, k=1)
        scene.anchor[1] = (0, 0, -5.0)  # behind the camera
        scene.offset[:] = 0
        snap = scene.snapshot()
        out, ctx = render(snap, simple_camera, return_context=True)
        ga = {k: rng.normal(size=v.shape) for k, v in zero_grads(out).items()}
        g = backward(snap, simple_camera, out, ga, context=ctx)
        assert np.all(g.offset[1] == 0)
        assert np.all(g.rotation[1] == 0)
        assert g.g_screen[1] == 0

    def test_nonfinite_upstream_grad_names_the_map(self, simple_camera,
                                                   random_scene):
        snap = random_scene.snapshot()
        out, ctx = render(snap, simple_camera, return_context=True)
        bad = zero_grads(out)
        bad["depth"][2, 2] = np.nan
        with pytest.raises(ValueError, match="'depth'"):
            backward(snap, simple_camera, out, bad, context=ctx)


class TestSeedStats:
    def test_zero_gradients_add_nothing(self, random_scene):
        n = random_scene.n_surfels
        g = ParamGrads(offset=np.zeros((n, 3)), rotation=np.zeros((n, 4)),
                       log_scale=np.zeros((n, 2)), raw_opacity=np.zeros(n),
                       raw_color=np.zeros((n, 3)), g_screen=np.zeros(n))
        before = random_scene.grad_accum.copy()
        accumulate_seed_stats(g, random_scene)
        np.testing.assert_array_equal(random_scene.grad_accum, before)
        assert np.all(random_scene.grad_count == 1)

    def test_mean_over_k_surfels(self, rng):
        scene = make_random_scene(rng, n_seeds=1, k=2)
        n = scene.n_surfels
        g = ParamGrads(offset=np.zeros((n, 3)), rotation=np.zeros((n, 4)),
                       log_scale=np.zeros((n, 2)), raw_opacity=np.zeros(n),
                       raw_color=np.zeros((n, 3)),
                       g_screen=np.array([0.1, 0.3]))
        accumulate_seed_stats(g, scene)
        np.testing.assert_allclose(scene.grad_accum[0], 0.2)
        np.testing.assert_allclose(
            scene.opacity_accum[0], sigmoid(scene.raw_opacity).sum())

    def test_running_sums_match_bruteforce(self, rng):
        scene = make_random_scene(rng, n_seeds=5, k=3)
        n = scene.n_surfels
        ref_g = np.zeros(scene.n_seeds)
        ref_o = np.zeros(scene.n_seeds)
        for _ in range(100):
            gs = rng.uniform(0, 1e-3, n)
            g = ParamGrads(offset=np.zeros((n, 3)), rotation=np.zeros((n, 4)),
                           log_scale=np.zeros((n, 2)), raw_opacity=np.zeros(n),
                           raw_color=np.zeros((n, 3)), g_screen=gs)
            accumulate_seed_stats(g, scene)
            for s in range(scene.n_seeds):
                ref_g[s] += gs[s * 3:(s + 1) * 3].mean()
                ref_o[s] += sigmoid(scene.raw_opacity[s * 3:(s + 1) * 3]).sum()
        np.testing.assert_allclose(scene.grad_accum, ref_g, rtol=1e-12)
        np.testing.assert_allclose(scene.opacity_accum, ref_o, rtol=1e-12)
        assert np.all(scene.grad_count == 100)
