"""Analytic backward pass through the surfel renderer.

Propagates map-level loss gradients (color, depth, normal, alpha) to every
raw surfel parameter by reversing the forward chain: compositing ->
per-contribution weight -> ray-splat intersection -> homogeneous splat
transform -> rotation / scale / center / opacity / color.

Compositing backward avoids divisions by running contribution ranks in
reverse with per-pixel suffix recursions

    B <- phi_i * w_i + (1 - w_i) * B      (indirect color/depth/normal path)
    U <- (1 - w_i) * U                    (alpha path)
    dL/dw_i = T_i * (phi_i - B + g_alpha * U)

which stays exact even for fully opaque contributions (w = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .rasterizer import RasterConfig, RenderContext, RenderOutput, _forward
from .scene import Camera, GaussianScene, SceneSnapshot, sigmoid

__all__ = ["ParamGrads", "backward", "accumulate_seed_stats"]


@dataclass
class ParamGrads:
    """Per-surfel gradients in the raw parameter layout, plus the
    screen-space positional gradient norm used for densification."""

    offset: np.ndarray       # (N, 3)
    rotation: np.ndarray     # (N, 4), tangent to the unit quaternion sphere
    log_scale: np.ndarray    # (N, 2)
    raw_opacity: np.ndarray  # (N,)
    raw_color: np.ndarray    # (N, 3)
    g_screen: np.ndarray     # (N,)

    def flat_norm(self) -> float:
        return float(np.sqrt(
            np.sum(self.offset ** 2) + np.sum(self.rotation ** 2)
            + np.sum(self.log_scale ** 2) + np.sum(self.raw_opacity ** 2)
            + np.sum(self.raw_color ** 2)))


def _rotmat_backward(dR: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """dL/d(raw quaternion) from dL/d(rotation matrix).

    The forward normalizes the quaternion, so the returned gradient is the
    tangent-projected gradient divided by the raw norm.
    """
    raw = np.asarray(quat, dtype=np.float64)
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    q = raw / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    dw = 2.0 * (-g[:, 0, 1] * z + g[:, 0, 2] * y + g[:, 1, 0] * z
                - g[:, 1, 2] * x - g[:, 2, 0] * y + g[:, 2, 1] * x)
    dx = 2.0 * (g[:, 0, 1] * y + g[:, 0, 2] * z + g[:, 1, 0] * y
                - 2.0 * g[:, 1, 1] * x - g[:, 1, 2] * w + g[:, 2, 0] * z
                + g[:, 2, 1] * w - 2.0 * g[:, 2, 2] * x)
    dy = 2.0 * (-2.0 * g[:, 0, 0] * y + g[:, 0, 1] * x + g[:, 0, 2] * w
                + g[:, 1, 0] * x + g[:, 1, 2] * z - g[:, 2, 0] * w
                + g[:, 2, 1] * z - 2.0 * g[:, 2, 2] * y)
    dz = 2.0 * (-2.0 * g[:, 0, 0] * z - g[:, 0, 1] * w + g[:, 0, 2] * x
                + g[:, 1, 0] * w - 2.0 * g[:, 1, 1] * z + g[:, 1, 2] * y
                + g[:, 2, 0] * x + g[:, 2, 1] * y)
    dq_hat = np.stack([dw, dx, dy, dz], axis=1)
    dq_hat -= q * np.sum(q * dq_hat, axis=1, keepdims=True)
    return dq_hat / norm


def backward(
    snapshot: SceneSnapshot,
    camera: Camera,
    render_output: RenderOutput,
    output_grads: dict[str, np.ndarray],
    config: RasterConfig | None = None,
    context: RenderContext | None = None,
) -> ParamGrads:
    """Exact reverse-mode differentiation of the forward render.

    ``output_grads`` holds dLoss/d{color, depth, normal, alpha} with the same
    shapes as the corresponding render maps; missing keys mean zero.  When no
    ``context`` is supplied the forward pass is recomputed internally.
    """
    if config is None:
        config = RasterConfig()
    if context is None:
        _, context = _forward(snapshot, camera, config)
    ctx = context
    n = snapshot.n_surfels
    h, w_img = camera.height, camera.width
    n_pix = h * w_img

    def grad_map(name, shape):
        arr = output_grads.get(name)
        if arr is None:
            return np.zeros(shape)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"output grad '{name}' has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite upstream gradient in map '{name}'")
        return arr

    g_color = grad_map("color", (h, w_img, 3)).reshape(n_pix, 3)
    g_depth = grad_map("depth", (h, w_img)).reshape(n_pix)
    g_normal = grad_map("normal", (h, w_img, 3)).reshape(n_pix, 3)
    g_alpha = grad_map("alpha", (h, w_img)).reshape(n_pix)

    grads = ParamGrads(
        offset=np.zeros((n, 3)),
        rotation=np.zeros((n, 4)),
        log_scale=np.zeros((n, 2)),
        raw_opacity=np.zeros(n),
        raw_color=np.zeros((n, 3)),
        g_screen=np.zeros(n),
    )
    P = ctx.pair_pixel.size
    if P == 0:
        return grads

    # normalization backward for the normal map: N = Nacc / |Nacc|
    nrm = np.linalg.norm(ctx.normal_acc, axis=1)
    safe_nrm = np.where(nrm > 0, nrm, 1.0)
    N_unit = ctx.normal_acc / safe_nrm[:, None]
    gamma = (g_normal - N_unit * np.sum(N_unit * g_normal, axis=1, keepdims=True))
    gamma = np.where(nrm[:, None] > 0, gamma / safe_nrm[:, None], 0.0)

    # expected-depth backward: D = depth_num / weight_sum
    wsum = ctx.weight_sum
    safe_wsum = np.where(wsum > 0, wsum, 1.0)
    depth_flat = np.where(wsum > 0, ctx.depth_num / safe_wsum, 0.0)
    g_depth_coef = np.where(wsum > 0, g_depth / safe_wsum, 0.0)

    inv2sig2 = 1.0 / (2.0 * ctx.config.lowpass_sigma ** 2)
    dM12 = np.zeros((n, 12))
    d_alpha_acc = np.zeros(n)
    d_color_acc = np.zeros((n, 3))
    d_normal_splat = np.zeros((n, 3))
    gxc = np.zeros(n)
    gyc = np.zeros(n)
    _kernels.backward_pairs(
        ctx.pair_offsets, ctx.pair_splat, ctx.pair_u, ctx.pair_v, ctx.pair_z,
        ctx.pair_w, ctx.pair_G, ctx.pair_obj_branch, ctx.pair_T,
        ctx.pair_included, ctx.M12, ctx.alphas, ctx.colors, ctx.normal_cam,
        np.ascontiguousarray(ctx.center_xy), w_img, inv2sig2,
        g_color, g_depth_coef, depth_flat, gamma, g_alpha,
        dM12, d_alpha_acc, d_color_acc, d_normal_splat, gxc, gyc)

    alphas = ctx.alphas
    col_act = ctx.colors
    grads.raw_color = d_color_acc * col_act * (1.0 - col_act)
    grads.raw_opacity = d_alpha_acc * alphas * (1.0 - alphas)

    # scatter the 12 tracked components back into the 4x4 gradient
    dM = np.zeros((n, 4, 4))
    dM[:, (0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3),
       (0, 1, 3, 0, 1, 3, 0, 1, 3, 0, 1, 3)] = dM12
    # low-pass projected-center terms: x_c = M03 / M33, y_c = M13 / M33
    m33 = ctx.M[:, 3, 3]
    safe_m33 = np.where(np.abs(m33) > 0, m33, 1.0)
    dM[:, 0, 3] += gxc / safe_m33
    dM[:, 1, 3] += gyc / safe_m33
    dM[:, 3, 3] += -(gxc * ctx.center_xy[:, 0] + gyc * ctx.center_xy[:, 1]) / safe_m33

    # M = W H  =>  dL/dH = W^T dL/dM
    W_mat = camera.world_to_screen()
    dH = np.einsum("ji,njk->nik", W_mat, dM, optimize=False)

    scales = ctx.scales
    t_u = ctx.rotmat[:, :, 0]
    t_v = ctx.rotmat[:, :, 1]
    d_su = np.sum(dH[:, :3, 0] * t_u, axis=1)
    d_sv = np.sum(dH[:, :3, 1] * t_v, axis=1)
    grads.log_scale[:, 0] = d_su * scales[:, 0]
    grads.log_scale[:, 1] = d_sv * scales[:, 1]

    d_tu = dH[:, :3, 0] * scales[:, 0:1]
    d_tv = dH[:, :3, 1] * scales[:, 1:2]
    # normal contributions: n_cam = flip * R_wc t_w
    d_tw = np.einsum("ji,nj->ni", camera.R_wc, d_normal_splat, optimize=False)
    d_tw *= ctx.flip_sign[:, None]
    dR = np.stack([d_tu, d_tv, d_tw], axis=2)
    grads.rotation = _rotmat_backward(dR, snapshot.quat)

    d_center = dH[:, :3, 3]
    grads.offset = d_center

    # densification statistic: virtual screen-translation pullback of the
    # center gradient, reported in NDC units (pixel gradient scaled by
    # half the image resolution)
    g_cam = np.einsum("ij,nj->ni", camera.R_wc, d_center, optimize=False)
    zc = ctx.center_depth
    gx_pix = zc / camera.fx * g_cam[:, 0]
    gy_pix = zc / camera.fy * g_cam[:, 1]
    grads.g_screen = np.hypot(0.5 * w_img * gx_pix, 0.5 * h * gy_pix)

    return grads


def accumulate_seed_stats(grads: ParamGrads, scene: GaussianScene) -> None:
    """Fold one backward pass into the seed densification accumulators.

    Each seed receives the mean screen-space gradient norm of its surfels and
    the summed activated opacity of its surfels.
    """
    k = scene.k
    s = scene.n_seeds
    seed_rows = scene.seed_of_surfel_rows()
    g_mean = np.bincount(seed_rows, weights=grads.g_screen, minlength=s) / k
    scene.grad_accum += g_mean
    scene.grad_count += 1
    alpha = sigmoid(scene.raw_opacity)
    scene.opacity_accum += np.bincount(seed_rows, weights=alpha, minlength=s)
