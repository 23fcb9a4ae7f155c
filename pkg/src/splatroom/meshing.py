"""Surface extraction: fuse rendered depth maps into a TSDF volume and run
marching cubes on the observed region.

The volume samples the signed distance at grid nodes; integration projects
every node into each view and blends per-observation truncated distances
with unit weights, so the result is independent of view order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from . import formats
from .rasterizer import RasterConfig, render
from .scene import Camera

__all__ = ["TsdfConfig", "TsdfVolume", "TriangleMesh", "integrate_depth",
           "extract_mesh", "reconstruct_mesh"]


@dataclass
class TsdfConfig:
    voxel_size: float = 0.02
    truncation: float = 0.10      # 5 * voxel_size
    margin_voxels: int = 6        # volume padding around the scene bounds

    def __post_init__(self):
        if self.voxel_size <= 0 or self.truncation <= 0:
            raise ValueError("voxel_size and truncation must be positive")


@dataclass
class TriangleMesh:
    vertices: np.ndarray                 # (N, 3)
    triangles: np.ndarray                # (M, 3) int
    colors: np.ndarray | None = None     # (N, 3) in [0, 1]
    normals: np.ndarray | None = None    # (N, 3)

    def is_empty(self) -> bool:
        return self.vertices.shape[0] == 0


class TsdfVolume:
    """Dense truncated signed-distance grid with per-node weights."""

    def __init__(self, origin, dims, voxel_size: float, truncation: float,
                 with_color: bool = True):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in dims)
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.tsdf = np.zeros(self.dims, dtype=np.float64)
        self.weight = np.zeros(self.dims, dtype=np.float64)
        self.color = np.zeros(self.dims + (3,), dtype=np.float64) if with_color else None

    @classmethod
    def for_bounds(cls, lo, hi, config: TsdfConfig) -> "TsdfVolume":
        lo = np.asarray(lo, float) - config.margin_voxels * config.voxel_size
        hi = np.asarray(hi, float) + config.margin_voxels * config.voxel_size
        dims = np.maximum(np.ceil((hi - lo) / config.voxel_size).astype(int) + 1, 2)
        return cls(lo, dims, config.voxel_size, config.truncation)

    def node_positions(self) -> np.ndarray:
        """(X, Y, Z, 3) world positions of the grid nodes."""
        axes = [self.origin[a] + np.arange(self.dims[a]) * self.voxel_size
                for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def integrate_depth(volume: TsdfVolume, depth: np.ndarray, color: np.ndarray | None,
                    alpha: np.ndarray | None, camera: Camera,
                    near: float = 0.01, far: float = 100.0) -> None:
    """Fuse one posed depth map into the volume (weight-1 running average).

    Pixels with alpha below 0.5 or depth outside [near, far] are skipped;
    the signed distance (depth minus node camera-z) is clamped to the
    truncation band and normalized to [-1, 1].
    """
    h, w = depth.shape
    nodes = volume.node_positions().reshape(-1, 3)
    cam = nodes @ camera.R_wc.T + camera.t_wc
    z = cam[:, 2]
    ok = z > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * cam[:, 0] / z + camera.cx
        py = camera.fy * cam[:, 1] / z + camera.cy
    col = np.floor(px).astype(np.int64)
    row = np.floor(py).astype(np.int64)
    ok &= (col >= 0) & (col < w) & (row >= 0) & (row < h)
    col_c = np.clip(col, 0, w - 1)
    row_c = np.clip(row, 0, h - 1)
    d_pix = depth[row_c, col_c]
    ok &= (d_pix >= near) & (d_pix <= far) & np.isfinite(d_pix)
    if alpha is not None:
        ok &= alpha[row_c, col_c] >= 0.5
    sdf = np.clip((d_pix - z) / volume.truncation, -1.0, 1.0)

    flat_t = volume.tsdf.reshape(-1)
    flat_w = volume.weight.reshape(-1)
    idx = np.flatnonzero(ok)
    w_old = flat_w[idx]
    w_new = w_old + 1.0
    flat_t[idx] = (flat_t[idx] * w_old + sdf[idx]) / w_new
    flat_w[idx] = w_new
    if volume.color is not None and color is not None:
        flat_c = volume.color.reshape(-1, 3)
        c_pix = color[row_c, col_c]
        flat_c[idx] = (flat_c[idx] * w_old[:, None] + c_pix[idx]) / w_new[:, None]


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Marching cubes over the observed region (all 8 cell corners weighted).

    Vertices interpolate the tsdf linearly along cell edges; coincident
    vertices are welded and zero-area triangles dropped.  An all-positive
    or all-negative observed field yields an empty mesh.
    """
    observed = volume.weight > 0
    vals = volume.tsdf[observed]
    if vals.size == 0 or vals.min() >= 0 or vals.max() <= 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # a cell participates only when all 8 of its corner nodes are observed;
    # the library mask is keyed on the cell's far corner (+1 on every axis)
    cell_ok = (observed[:-1, :-1, :-1] & observed[1:, :-1, :-1]
               & observed[:-1, 1:, :-1] & observed[:-1, :-1, 1:]
               & observed[1:, 1:, :-1] & observed[1:, :-1, 1:]
               & observed[:-1, 1:, 1:] & observed[1:, 1:, 1:])
    mask = np.zeros_like(observed)
    mask[1:, 1:, 1:] = cell_ok
    if not mask.any():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    try:
        verts, faces, normals, _ = measure.marching_cubes(
            volume.tsdf, level=0.0, spacing=(volume.voxel_size,) * 3, mask=mask)
    except RuntimeError:  # no surface within the masked region
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts = verts + volume.origin
    faces = faces.astype(np.int64)

    # weld coincident vertices so degenerate triangles can be dropped
    # without opening the surface
    quant = np.round(verts / (1e-6 * volume.voxel_size)).astype(np.int64)
    _, first_idx, remap = np.unique(quant, axis=0, return_index=True,
                                    return_inverse=True)
    verts = verts[first_idx]
    normals = normals[first_idx]
    faces = remap[faces]
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    faces = faces[area2 > 1e-20]

    colors = None
    if volume.color is not None:
        # nearest-node color lookup
        idx = np.clip(np.round((verts - volume.origin) / volume.voxel_size).astype(int),
                      0, np.asarray(volume.dims) - 1)
        colors = volume.color[idx[:, 0], idx[:, 1], idx[:, 2]]
    return TriangleMesh(vertices=verts, triangles=faces, colors=colors,
                        normals=normals)


def reconstruct_mesh(scene, dataset, tsdf_config: TsdfConfig | None = None,
                     raster_config: RasterConfig | None = None,
                     out_path=None) -> TriangleMesh:
    """Render every training view's depth, fuse, and extract the surface."""
    if tsdf_config is None:
        tsdf_config = TsdfConfig()
    if raster_config is None:
        raster_config = RasterConfig()
    if scene.n_surfels == 0:
        mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        if out_path is not None:
            formats.write_ply_mesh(out_path, mesh.vertices, mesh.triangles)
        return mesh
    snapshot = scene.snapshot()
    centers = snapshot.world_centers()
    volume = TsdfVolume.for_bounds(centers.min(axis=0), centers.max(axis=0),
                                   tsdf_config)
    for frame in dataset.frames:
        out = render(snapshot, frame.camera, raster_config)
        integrate_depth(volume, out.depth, out.color, out.alpha, frame.camera,
                        near=raster_config.near, far=raster_config.far)
    mesh = extract_mesh(volume)
    if out_path is not None:
        formats.write_ply_mesh(out_path, mesh.vertices, mesh.triangles, mesh.colors)
    return mesh
