import numpy as np
import pytest

from splatroom.dataset import Dataset, FrameBundle
from splatroom.meshing import (TsdfConfig, TsdfVolume, extract_mesh,
                               integrate_depth, reconstruct_mesh)
from splatroom.scene import Camera, GaussianScene, SeedConfig


@pytest.fixture
def front_camera():
    K = np.array([[80.0, 0, 32], [0, 80.0, 32], [0, 0, 1.0]])
    return Camera(K=K, R_wc=np.eye(3), t_wc=np.zeros(3), width=64, height=64)


def plane_volume():
    return TsdfVolume(origin=(-0.5, -0.5, 1.0), dims=(51, 51, 101),
                      voxel_size=0.02, truncation=0.1, with_color=False)


class TestIntegrate:
    def test_zero_crossing_straddles_plane(self, front_camera):
        vol = plane_volume()
        integrate_depth(vol, np.full((64, 64), 2.0), None, None, front_camera)
        col = vol.tsdf[25, 25]
        obs = vol.weight[25, 25] > 0
        zs = 1.0 + np.arange(101) * 0.02
        vals = col[obs]
        z_obs = zs[obs]
        # strictly positive before the plane, non-positive from it onward;
        # the interpolated zero lands exactly at z = 2
        assert np.all(vals[z_obs < 1.99] > 0)
        assert np.all(vals[z_obs > 2.01] < 0)
        i = np.flatnonzero((vals[:-1] > 0) & (vals[1:] <= 0))[0]
        z0 = z_obs[i] + (z_obs[i + 1] - z_obs[i]) * vals[i] / (vals[i] - vals[i + 1])
        np.testing.assert_allclose(z0, 2.0, atol=1e-12)

    def test_double_integration_fixed_point(self, front_camera):
        vol = plane_volume()
        depth = np.full((64, 64), 2.0)
        integrate_depth(vol, depth, None, None, front_camera)
        once = vol.tsdf.copy()
        w_once = vol.weight.copy()
        integrate_depth(vol, depth, None, None, front_camera)
        np.testing.assert_array_equal(vol.tsdf, once)
        np.testing.assert_array_equal(vol.weight, 2 * w_once)

    def test_view_order_invariance(self, rng, front_camera):
        d1 = np.full((64, 64), 2.0) + rng.uniform(-0.05, 0.05, (64, 64))
        d2 = np.full((64, 64), 2.1) + rng.uniform(-0.05, 0.05, (64, 64))
        va, vb = plane_volume(), plane_volume()
        integrate_depth(va, d1, None, None, front_camera)
        integrate_depth(va, d2, None, None, front_camera)
        integrate_depth(vb, d2, None, None, front_camera)
        integrate_depth(vb, d1, None, None, front_camera)
        np.testing.assert_allclose(va.tsdf, vb.tsdf, atol=1e-6)

    def test_low_alpha_pixels_skipped(self, front_camera):
        vol = plane_volume()
        alpha = np.zeros((64, 64))
        integrate_depth(vol, np.full((64, 64), 2.0), None, alpha, front_camera)
        assert vol.weight.max() == 0.0


class TestExtract:
    def test_all_positive_gives_empty_mesh(self):
        vol = plane_volume()
        vol.tsdf[:] = 0.7
        vol.weight[:] = 1.0
        assert extract_mesh(vol).is_empty()

    def test_sphere_radius_and_euler(self):
        vol = TsdfVolume(origin=(-1.3,) * 3, dims=(53,) * 3, voxel_size=0.05,
                         truncation=0.25, with_color=False)
        nodes = vol.node_positions()
        vol.tsdf = np.clip((np.linalg.norm(nodes, axis=-1) - 1.0) / 0.25, -1, 1)
        vol.weight[:] = 1.0
        mesh = extract_mesh(vol)
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(radii - 1.0).max() < 0.05  # one voxel
        edges = set()
        for tri in mesh.triangles:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                edges.add((min(tri[a], tri[b]), max(tri[a], tri[b])))
        assert len(mesh.vertices) - len(edges) + len(mesh.triangles) == 2

    def test_affine_field_interpolation_exact(self, rng):
        vol = TsdfVolume(origin=(0, 0, 0), dims=(9, 9, 9), voxel_size=0.1,
                         truncation=1.0, with_color=False)
        nodes = vol.node_positions()
        coef = rng.uniform(0.4, 1.0, 3)
        vol.tsdf = (nodes * coef).sum(-1) - 0.42
        vol.weight[:] = 1.0
        mesh = extract_mesh(vol)
        resid = np.abs((mesh.vertices * coef).sum(1) - 0.42) / np.linalg.norm(coef)
        assert resid.max() < 1e-6 * vol.voxel_size

    def test_no_degenerate_triangles(self, rng):
        vol = TsdfVolume(origin=(-1.3,) * 3, dims=(33,) * 3, voxel_size=0.08,
                         truncation=0.3, with_color=False)
        nodes = vol.node_positions()
        vol.tsdf = np.clip((np.linalg.norm(nodes, axis=-1) - 0.9) / 0.3, -1, 1)
        vol.weight[:] = 1.0
        mesh = extract_mesh(vol)
        e1 = mesh.vertices[mesh.triangles[:, 1]] - mesh.vertices[mesh.triangles[:, 0]]
        e2 = mesh.vertices[mesh.triangles[:, 2]] - mesh.vertices[mesh.triangles[:, 0]]
        areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
        assert areas.min() > 0

    def test_vertices_inside_volume_bounds(self):
        vol = plane_volume()
        integrate_depth(vol, np.full((64, 64), 2.0), None, None,
                        Camera(K=np.array([[80.0, 0, 32], [0, 80.0, 32], [0, 0, 1]]),
                               R_wc=np.eye(3), t_wc=np.zeros(3), width=64, height=64))
        mesh = extract_mesh(vol)
        lo = vol.origin
        hi = vol.origin + (np.array(vol.dims) - 1) * vol.voxel_size
        assert np.all(mesh.vertices >= lo - 1e-9)
        assert np.all(mesh.vertices <= hi + 1e-9)


class TestReconstruct:
    def test_zero_surfel_scene_gives_empty_mesh(self, front_camera):
        scene = GaussianScene(SeedConfig(surfels_per_seed=1))
        ds = Dataset(frames=[FrameBundle(frame_id="f", camera=front_camera,
                                         image=np.zeros((64, 64, 3)))], points=[])
        mesh = reconstruct_mesh(scene, ds, TsdfConfig())
        assert mesh.is_empty()

    def test_single_splat_planar_patch(self, front_camera):
        # one opaque fronto-parallel splat: the fused surface sits near z = 2
        from test_rasterizer import single_splat_scene
        scene = single_splat_scene((0, 0, 2.0), scales=(0.5, 0.5))
        ds = Dataset(frames=[FrameBundle(frame_id="f", camera=front_camera,
                                         image=np.zeros((64, 64, 3)))], points=[])
        mesh = reconstruct_mesh(scene, ds, TsdfConfig(voxel_size=0.02,
                                                      truncation=0.1))
        assert not mesh.is_empty()
        assert np.abs(mesh.vertices[:, 2] - 2.0).max() < 0.02
