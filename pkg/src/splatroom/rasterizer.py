"""Forward surfel rendering: color, expected depth, blended normal, alpha.

Every surfel is a flat elliptical Gaussian disk.  A pixel ray is the
intersection of two homogeneous planes; transforming those planes into the
disk's tangent frame gives a closed-form ray-splat intersection (u, v) and
depth z without inverting near-singular projections.  Per pixel the
contributions are alpha-composited front to back in canonical order
(center depth, ties broken by surfel uid).

The vectorized path operates on flat (pixel, splat) candidate-pair arrays;
compositing walks contribution ranks so the floating-point operation
sequence per pixel is identical to a scalar front-to-back loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .scene import Camera, SceneSnapshot, sigmoid

__all__ = [
    "RasterConfig",
    "RenderOutput",
    "SplatGeometry",
    "RenderContext",
    "build_splat_geometry",
    "ray_splat_intersect",
    "gaussian_weight",
    "render",
    "quat_to_rotmat",
    "splat_frames",
]


@dataclass
class RasterConfig:
    """Rendering knobs; defaults follow common surfel-splatting practice."""

    near: float = 0.01
    far: float = 100.0
    tile_size: int = 64
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    lowpass_sigma: float = 0.3
    alpha_valid_threshold: float = 0.5

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")


@dataclass
class RenderOutput:
    """Per-pixel maps produced by one forward pass."""

    color: np.ndarray   # (H, W, 3) in [0, 1]
    depth: np.ndarray   # (H, W) camera-z expected depth, 0 where alpha == 0
    normal: np.ndarray  # (H, W, 3) camera-space unit vectors, 0 where alpha == 0
    alpha: np.ndarray   # (H, W) in [0, 1]


@dataclass
class SplatGeometry:
    """Homogeneous geometry of one surfel under one camera."""

    H: np.ndarray        # 4x4 splat-to-world (columns s_u*t_u, s_v*t_v, 0, center)
    M: np.ndarray        # 4x4 world-to-screen @ H
    culled: bool = False


@dataclass
class RenderContext:
    """Intermediates retained from a forward pass for the backward pass."""

    camera: Camera
    config: RasterConfig
    # per-splat
    M: np.ndarray             # (N, 4, 4)
    rotmat: np.ndarray        # (N, 3, 3)
    scales: np.ndarray        # (N, 2)
    alphas: np.ndarray        # (N,)
    colors: np.ndarray        # (N, 3)
    normal_cam: np.ndarray    # (N, 3) flipped camera-space disk normals
    flip_sign: np.ndarray     # (N,)
    center_depth: np.ndarray  # (N,)
    center_xy: np.ndarray     # (N, 2) projected centers (pixels)
    # per contributing pair, sorted by (pixel, depth, uid)
    pair_splat: np.ndarray    # (P,) splat row index
    pair_pixel: np.ndarray    # (P,) flat pixel index
    pair_rank: np.ndarray     # (P,) contribution rank within its pixel
    pair_u: np.ndarray
    pair_v: np.ndarray
    pair_z: np.ndarray
    pair_w: np.ndarray        # alpha * G
    pair_G: np.ndarray
    pair_obj_branch: np.ndarray  # bool, object-space Gaussian dominated
    pair_T: np.ndarray        # transmittance before the contribution
    pair_included: np.ndarray  # bool, False once T fell below the floor
    pair_offsets: np.ndarray  # (H*W + 1,) pixel segment offsets into the pairs
    M12: np.ndarray           # (N, 12) used components of M, kernel layout
    # per-pixel accumulators
    weight_sum: np.ndarray    # (H*W,) sum w_i T_i
    depth_num: np.ndarray     # (H*W,) sum z_i w_i T_i
    normal_acc: np.ndarray    # (H*W, 3) pre-normalization normal sum
    final_T: np.ndarray       # (H*W,)


def quat_to_rotmat(quat: np.ndarray) -> np.ndarray:
    """Rotation matrices from (possibly unnormalized) (w, x, y, z) quaternions."""
    q = np.atleast_2d(np.asarray(quat, dtype=np.float64))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def splat_frames(snapshot: SceneSnapshot) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-surfel (rotation matrices, scales, world centers)."""
    R = quat_to_rotmat(snapshot.quat)
    scales = np.exp(snapshot.log_scale)
    centers = snapshot.world_centers()
    return R, scales, centers


def _build_H(rotmat: np.ndarray, scales: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Stack of 4x4 splat-to-world transforms."""
    n = rotmat.shape[0]
    H = np.zeros((n, 4, 4), dtype=np.float64)
    H[:, :3, 0] = rotmat[:, :, 0] * scales[:, 0:1]
    H[:, :3, 1] = rotmat[:, :, 1] * scales[:, 1:2]
    H[:, :3, 3] = centers
    H[:, 3, 3] = 1.0
    return H


def _matmul_W_H(W: np.ndarray, H: np.ndarray) -> np.ndarray:
    # explicit contraction keeps reductions order-fixed and thread-independent
    return np.einsum("ij,njk->nik", W, H, optimize=False)


def build_splat_geometry(center, quat, scales, camera: Camera,
                         config: RasterConfig | None = None) -> SplatGeometry:
    """Geometry of a single surfel (world center, quaternion, two scales)."""
    if config is None:
        config = RasterConfig()
    R = quat_to_rotmat(np.asarray(quat, dtype=np.float64))[0]
    H = _build_H(R[None], np.asarray(scales, dtype=np.float64).reshape(1, 2),
                 np.asarray(center, dtype=np.float64).reshape(1, 3))[0]
    M = camera.world_to_screen() @ H
    z_center = M[2, 3]
    extent = 3.0 * float(np.max(scales))
    culled = bool(z_center + extent < config.near)
    return SplatGeometry(H=H, M=M, culled=culled)


def ray_splat_intersect(geometry: SplatGeometry, pixel: tuple[float, float],
                        near: float = 0.01, far: float = 100.0):
    """Closed-form intersection of one pixel ray with one splat plane.

    Returns (u, v, z) in the splat tangent frame, or None when the ray is
    parallel to the plane (degenerate denominator) or the hit depth falls
    outside [near, far].
    """
    if geometry.culled:
        raise ValueError("geometry was culled")
    M = geometry.M
    x, y = pixel
    h_u = x * M[3] - M[0]
    h_v = y * M[3] - M[1]
    denom = h_u[0] * h_v[1] - h_u[1] * h_v[0]
    if abs(denom) < 1e-12:
        return None
    u = (h_u[1] * h_v[3] - h_u[3] * h_v[1]) / denom
    v = (h_u[3] * h_v[0] - h_u[0] * h_v[3]) / denom
    z = M[2, 0] * u + M[2, 1] * v + M[2, 3]
    if z < near or z > far:
        return None
    return (u, v, z)


def gaussian_weight(u: float, v: float, screen_dist_sq: float,
                    lowpass_sigma: float) -> float:
    """Splat weight: object-space Gaussian with a screen-space low-pass floor."""
    obj = np.exp(-(u * u + v * v) / 2.0)
    scr = np.exp(-screen_dist_sq / (2.0 * lowpass_sigma * lowpass_sigma))
    return float(max(obj, scr))


def _conic_bbox(M: np.ndarray, rho: np.ndarray, width: int, height: int,
                lowpass_pad: np.ndarray, center_xy: np.ndarray):
    """Axis-aligned pixel bounds of each splat's weight support.

    The image of the disk u^2 + v^2 <= rho^2 under the homogeneous map M is a
    conic; for the elliptic case its extremes have a closed form.  Non-elliptic
    images (splat plane crossing the camera plane) fall back to the full image.
    """
    n = M.shape[0]
    # rows restricted to (u, v, const) with the disk radius folded into u, v
    m0 = np.stack([M[:, 0, 0] * rho, M[:, 0, 1] * rho, M[:, 0, 3]], axis=1)
    m1 = np.stack([M[:, 1, 0] * rho, M[:, 1, 1] * rho, M[:, 1, 3]], axis=1)
    m3 = np.stack([M[:, 3, 0] * rho, M[:, 3, 1] * rho, M[:, 3, 3]], axis=1)

    def qform(a, b):
        return a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1] - a[:, 2] * b[:, 2]

    d = qform(m3, m3)
    elliptic = d < -1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        cx = qform(m0, m3) / d
        cy = qform(m1, m3) / d
        hx = np.sqrt(np.maximum(0.0, cx * cx - qform(m0, m0) / d))
        hy = np.sqrt(np.maximum(0.0, cy * cy - qform(m1, m1) / d))
    x0 = np.where(elliptic, cx - hx, 0.0)
    x1 = np.where(elliptic, cx + hx, float(width))
    y0 = np.where(elliptic, cy - hy, 0.0)
    y1 = np.where(elliptic, cy + hy, float(height))
    # union with the low-pass footprint around the projected center
    x0 = np.minimum(x0, center_xy[:, 0] - lowpass_pad)
    x1 = np.maximum(x1, center_xy[:, 0] + lowpass_pad)
    y0 = np.minimum(y0, center_xy[:, 1] - lowpass_pad)
    y1 = np.maximum(y1, center_xy[:, 1] + lowpass_pad)
    # tight pixel index ranges: centers at c + 0.5 within [x0, x1]
    c0 = np.clip(np.ceil(x0 - 0.5 - 1e-9).astype(np.int64), 0, width)
    c1 = np.clip(np.floor(x1 - 0.5 + 1e-9).astype(np.int64) + 1, 0, width)
    r0 = np.clip(np.ceil(y0 - 0.5 - 1e-9).astype(np.int64), 0, height)
    r1 = np.clip(np.floor(y1 - 0.5 + 1e-9).astype(np.int64) + 1, 0, height)
    return r0, r1, c0, c1


def _forward(snapshot: SceneSnapshot, camera: Camera, config: RasterConfig):
    """Shared forward pass; returns (RenderOutput, RenderContext)."""
    n = snapshot.n_surfels
    if n == 0:
        raise ValueError("scene has no active surfels")
    W_mat = camera.world_to_screen()
    rotmat, scales, centers = splat_frames(snapshot)
    alphas = sigmoid(snapshot.raw_opacity)
    colors = sigmoid(snapshot.raw_color)
    H = _build_H(rotmat, scales, centers)
    M = _matmul_W_H(W_mat, H)

    center_depth = M[:, 2, 3]
    w33 = M[:, 3, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        center_xy = np.stack([M[:, 0, 3] / w33, M[:, 1, 3] / w33], axis=1)

    # camera-space disk normals, flipped toward the camera per splat
    normal_cam_raw = np.einsum("ij,nj->ni", camera.R_wc, rotmat[:, :, 2], optimize=False)
    center_cam = camera.world_to_camera(centers)
    flip_sign = np.where(np.einsum("ni,ni->n", normal_cam_raw, center_cam,
                                   optimize=False) > 0, -1.0, 1.0)
    normal_cam = normal_cam_raw * flip_sign[:, None]

    height, width = camera.height, camera.width
    n_pix = height * width

    # frustum cull: center at or behind the near plane, beyond far, or weight
    # below cutoff (per-pixel hits are additionally z-clipped to [near, far])
    extent = 3.5 * np.max(scales, axis=1)
    visible = (center_depth > config.near) & \
              (center_depth - extent < config.far) & \
              (alphas > config.alpha_cutoff) & np.isfinite(center_xy).all(axis=1)

    out_color = np.zeros((n_pix, 3))
    out_alpha = np.zeros(n_pix)
    weight_sum = np.zeros(n_pix)
    depth_num = np.zeros(n_pix)
    normal_acc = np.zeros((n_pix, 3))
    final_T = np.ones(n_pix)

    empty_ctx_fields = dict(
        pair_splat=np.empty(0, np.int64), pair_pixel=np.empty(0, np.int64),
        pair_rank=np.empty(0, np.int64), pair_u=np.empty(0), pair_v=np.empty(0),
        pair_z=np.empty(0), pair_w=np.empty(0), pair_G=np.empty(0),
        pair_obj_branch=np.empty(0, bool), pair_T=np.empty(0),
        pair_included=np.empty(0, bool),
        pair_offsets=np.zeros(n_pix + 1, np.int64), M12=np.zeros((n, 12)),
    )

    def make_output():
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = np.where(weight_sum > 0, depth_num / np.where(weight_sum > 0, weight_sum, 1.0), 0.0)
        nrm = np.linalg.norm(normal_acc, axis=1, keepdims=True)
        normal = np.where(nrm > 0, normal_acc / np.where(nrm > 0, nrm, 1.0), 0.0)
        return RenderOutput(
            color=out_color.reshape(height, width, 3),
            depth=depth.reshape(height, width),
            normal=normal.reshape(height, width, 3),
            alpha=out_alpha.reshape(height, width),
        )

    vis_idx = np.flatnonzero(visible)
    if vis_idx.size == 0:
        ctx = RenderContext(camera=camera, config=config, M=M, rotmat=rotmat,
                            scales=scales, alphas=alphas, colors=colors,
                            normal_cam=normal_cam, flip_sign=flip_sign,
                            center_depth=center_depth, center_xy=center_xy,
                            weight_sum=weight_sum, depth_num=depth_num,
                            normal_acc=normal_acc, final_T=final_T,
                            **empty_ctx_fields)
        return make_output(), ctx

    # support radius in tangent units from the per-splat opacity
    rho = np.sqrt(2.0 * np.maximum(np.log(alphas[vis_idx] / config.alpha_cutoff), 0.0))
    lowpass_pad = config.lowpass_sigma * np.sqrt(
        2.0 * np.maximum(np.log(alphas[vis_idx] / config.alpha_cutoff), 0.0))
    r0, r1, c0, c1 = _conic_bbox(M[vis_idx], rho, width, height,
                                 lowpass_pad, center_xy[vis_idx])
    keep = (c1 > c0) & (r1 > r0)
    vis_idx, r0, r1, c0, c1 = (a[keep] for a in (vis_idx, r0, r1, c0, c1))

    if vis_idx.size == 0:
        ctx = RenderContext(camera=camera, config=config, M=M, rotmat=rotmat,
                            scales=scales, alphas=alphas, colors=colors,
                            normal_cam=normal_cam, flip_sign=flip_sign,
                            center_depth=center_depth, center_xy=center_xy,
                            weight_sum=weight_sum, depth_num=depth_num,
                            normal_acc=normal_acc, final_T=final_T,
                            **empty_ctx_fields)
        return make_output(), ctx

    # splats visit pixels in canonical depth order so each pixel's pairs land
    # pre-sorted; ties broken by surfel uid
    depth_order = np.lexsort((snapshot.surfel_uid[vis_idx], center_depth[vis_idx]))
    order = np.ascontiguousarray(vis_idx[depth_order])
    r0, r1, c0, c1 = (np.ascontiguousarray(a[depth_order]) for a in (r0, r1, c0, c1))

    M12 = np.ascontiguousarray(M[:, (0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3),
                                 (0, 1, 3, 0, 1, 3, 0, 1, 3, 0, 1, 3)])
    inv2sig2 = 1.0 / (2.0 * config.lowpass_sigma ** 2)
    cxy_c = np.ascontiguousarray(center_xy)
    pix_counts = np.zeros(n_pix, dtype=np.int64)
    _kernels.count_pairs(order, r0, r1, c0, c1, M12, alphas, cxy_c, width,
                         config.near, config.far, config.alpha_cutoff,
                         inv2sig2, pix_counts)
    P = int(pix_counts.sum())
    offsets = np.zeros(n_pix + 1, dtype=np.int64)
    np.cumsum(pix_counts, out=offsets[1:])
    pair_splat = np.empty(P, dtype=np.int64)
    pair_pixel = np.empty(P, dtype=np.int64)
    u = np.empty(P)
    v = np.empty(P)
    z = np.empty(P)
    w = np.empty(P)
    G = np.empty(P)
    obj_branch = np.empty(P, dtype=np.bool_)
    _kernels.fill_pairs(order, r0, r1, c0, c1, M12, alphas, cxy_c, width,
                        config.near, config.far, config.alpha_cutoff,
                        inv2sig2, offsets[:-1].copy(),
                        pair_splat, pair_pixel, u, v, z, w, G, obj_branch)

    pair_T = np.ones(P)
    included = np.zeros(P, dtype=np.bool_)
    final_T = np.ones(n_pix)
    _kernels.composite(offsets, pair_splat, z, w, colors, normal_cam,
                       config.transmittance_floor, out_color, weight_sum,
                       depth_num, normal_acc, final_T, pair_T, included)
    out_alpha = 1.0 - final_T

    if P:
        rank = np.arange(P, dtype=np.int64) - np.repeat(offsets[:-1], pix_counts)
    else:
        rank = np.empty(0, np.int64)

    ctx = RenderContext(
        camera=camera, config=config, M=M, rotmat=rotmat, scales=scales,
        alphas=alphas, colors=colors, normal_cam=normal_cam,
        flip_sign=flip_sign, center_depth=center_depth, center_xy=center_xy,
        pair_splat=pair_splat, pair_pixel=pair_pixel, pair_rank=rank,
        pair_u=u, pair_v=v, pair_z=z, pair_w=w, pair_G=G,
        pair_obj_branch=obj_branch, pair_T=pair_T, pair_included=included,
        pair_offsets=offsets, M12=M12,
        weight_sum=weight_sum, depth_num=depth_num, normal_acc=normal_acc,
        final_T=final_T,
    )
    return make_output(), ctx


def render(snapshot: SceneSnapshot, camera: Camera,
           config: RasterConfig | None = None,
           return_context: bool = False):
    """Render all maps for one camera.

    With ``return_context=True`` the forward intermediates are returned as a
    second value for reuse by the backward pass.
    """
    if config is None:
        config = RasterConfig()
    out, ctx = _forward(snapshot, camera, config)
    if return_context:
        return out, ctx
    return out
