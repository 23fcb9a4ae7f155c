"""Training objectives and their analytic gradients w.r.t. rendered maps.

Terms: photometric RGB (L1 + windowed SSIM), scale-shift-invariant depth
with a multi-scale gradient regularizer, normal L1 + cosine, and two-view
geometric / photometric consistency built on plane-induced homographies.

Every loss returns its scalar value together with gradient maps matching
its rendered-map inputs, so the trainer can feed them straight into the
renderer's backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "LossWeights",
    "DepthAlignment",
    "MvConfig",
    "rgb_loss",
    "align_depth",
    "depth_loss",
    "normal_loss",
    "plane_homography",
    "mv_consistency_loss",
    "total_loss",
    "ncc",
    "ssim",
    "select_neighbor_view",
    "MvPlan",
]


@dataclass
class LossWeights:
    """Loss mixing weights; lambda_rgb scales the photometric term so the
    whole objective can be switched off in ablations."""

    lambda_rgb: float = 1.0
    lambda_d: float = 1.0
    lambda_n: float = 1.0
    lambda_1: float = 0.01
    lambda_cos: float = 0.01
    lambda_grad: float = 0.5
    lambda_geo: float = 0.05
    lambda_pho: float = 0.2
    rgb_ssim_mix: float = 0.2

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if val < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class DepthAlignment:
    """Least-squares scale/shift aligning rendered depth to the prior."""

    s: float
    t: float
    degenerate: bool = False


@dataclass
class MvConfig:
    """Two-view consistency parameters."""

    patch_radius: int = 3
    sample_stride: int = 4
    tau_geo: float = 1.0     # px, reprojection error cutoff for valid pixels
    start_iter: int = 7000

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")


# ---------------------------------------------------------------------------
# photometric RGB
# ---------------------------------------------------------------------------

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _ssim_kernel() -> np.ndarray:
    half = _SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    return k / k.sum()


_KERNEL_1D = _ssim_kernel()


def _window_filter(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian window average with zero padding, per channel."""
    out = correlate1d(img, _KERNEL_1D, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL_1D, axis=1, mode="constant", cval=0.0)


def ssim(img1: np.ndarray, img2: np.ndarray) -> float:
    """Mean 11x11 Gaussian-windowed SSIM over pixels and channels."""
    ssim_map, _ = _ssim_forward(np.asarray(img1, float), np.asarray(img2, float))
    return float(np.mean(ssim_map))


def _ssim_forward(i1: np.ndarray, i2: np.ndarray):
    mu1 = _window_filter(i1)
    mu2 = _window_filter(i2)
    p11 = _window_filter(i1 * i1)
    p22 = _window_filter(i2 * i2)
    p12 = _window_filter(i1 * i2)
    A = 2.0 * mu1 * mu2 + _SSIM_C1
    B = 2.0 * (p12 - mu1 * mu2) + _SSIM_C2
    C = mu1 ** 2 + mu2 ** 2 + _SSIM_C1
    D = (p11 - mu1 ** 2) + (p22 - mu2 ** 2) + _SSIM_C2
    ssim_map = (A * B) / (C * D)
    return ssim_map, (mu1, mu2, p11, p22, p12, A, B, C, D)


def rgb_loss(rendered: np.ndarray, target: np.ndarray,
             weights: LossWeights | None = None):
    """(1 - mix) * L1 + mix * (1 - SSIM); returns (value, dL/drendered)."""
    if weights is None:
        weights = LossWeights()
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"image shape mismatch: {r.shape} vs {t.shape}")
    mix = weights.rgb_ssim_mix
    n_el = r.size
    diff = r - t
    if not diff.any():
        # identical images: the exact gradient is zero; skip the windowed
        # statistics whose rounding noise Adam would otherwise amplify
        return 0.0, np.zeros_like(r)
    l1 = np.mean(np.abs(diff))
    ssim_map, (mu1, mu2, p11, p22, p12, A, B, C, D) = _ssim_forward(r, t)
    value = (1.0 - mix) * l1 + mix * (1.0 - float(np.mean(ssim_map)))

    # dL/dSSIM_map is uniform; push through the windowed statistics
    gm = -mix / n_el
    S = ssim_map
    CD = C * D
    dS_dmu1 = 2.0 * mu2 * (B - A) / CD - 2.0 * mu1 * S * (1.0 / C - 1.0 / D)
    dS_dp11 = -S / D
    dS_dp12 = 2.0 * A / CD
    grad = (1.0 - mix) * np.sign(diff) / n_el
    grad += _window_filter(gm * dS_dmu1)
    grad += 2.0 * r * _window_filter(gm * dS_dp11)
    grad += t * _window_filter(gm * dS_dp12)
    return value, grad


# ---------------------------------------------------------------------------
# depth prior
# ---------------------------------------------------------------------------

def align_depth(rendered: np.ndarray, prior: np.ndarray,
                valid: np.ndarray) -> DepthAlignment:
    """Solve the 2x2 normal equations for min sum (s*rendered + t - prior)^2.

    Falls back to s=0, t=mean(prior) (flagged) when the rendered depth is
    constant over the valid set.
    """
    d_hat = np.asarray(rendered, dtype=np.float64)[valid]
    d = np.asarray(prior, dtype=np.float64)[valid]
    n = d_hat.size
    if n < 2:
        raise ValueError("need at least 2 valid pixels to align depth")
    s_dd = float(np.sum(d_hat * d_hat))
    s_d = float(np.sum(d_hat))
    det = s_dd * n - s_d * s_d
    if det <= 1e-12 * max(s_dd * n, 1.0):
        return DepthAlignment(s=0.0, t=float(np.mean(d)), degenerate=True)
    b0 = float(np.sum(d_hat * d))
    b1 = float(np.sum(d))
    s = (n * b0 - s_d * b1) / det
    t = (-s_d * b0 + s_dd * b1) / det
    return DepthAlignment(s=s, t=t)


def _downsample_masked(arr: np.ndarray, mask: np.ndarray):
    """2x downsampling by valid-pixel averaging (trailing odd row/col cropped)."""
    h, w = arr.shape
    h2, w2 = h // 2, w // 2
    a = np.where(mask, arr, 0.0)[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2)
    m = mask[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2)
    counts = m.sum(axis=(1, 3))
    sums = a.sum(axis=(1, 3))
    out_mask = counts > 0
    out = np.where(out_mask, sums / np.maximum(counts, 1), 0.0)
    return out, out_mask, counts


def _grad_term_forward(res: np.ndarray, mask: np.ndarray):
    """Sum over scales {1,2,4,8} of mean |forward differences| of the residual.

    Returns (value, per-scale caches) for the backward sweep.
    """
    value = 0.0
    caches = []
    r, m = res, mask
    for lvl in range(4):
        mx = m[:, 1:] & m[:, :-1]
        my = m[1:, :] & m[:-1, :]
        dx = np.where(mx, r[:, 1:] - r[:, :-1], 0.0)
        dy = np.where(my, r[1:, :] - r[:-1, :], 0.0)
        cx = int(mx.sum())
        cy = int(my.sum())
        tx = float(np.abs(dx).sum()) / cx if cx else 0.0
        ty = float(np.abs(dy).sum()) / cy if cy else 0.0
        value += tx + ty
        caches.append((r.shape, m, mx, my, np.sign(dx), np.sign(dy), cx, cy))
        if lvl < 3:
            r, m, counts = _downsample_masked(r, m)
            caches[-1] += (counts,)
    return value, caches


def _grad_term_backward(caches):
    """dL/d(residual at full resolution) for the multi-scale gradient term."""
    grad = None
    for lvl in range(3, -1, -1):
        cache = caches[lvl]
        shape, m, mx, my, sx, sy, cx, cy = cache[:8]
        g = np.zeros(shape)
        if cx:
            g[:, 1:] += sx / cx
            g[:, :-1] -= sx / cx
        if cy:
            g[1:, :] += sy / cy
            g[:-1, :] -= sy / cy
        if grad is not None:
            g += grad
        if lvl > 0:
            # transpose of valid-average 2x downsampling from the finer level
            fine_shape, fine_mask = caches[lvl - 1][0], caches[lvl - 1][1]
            counts = caches[lvl - 1][8]
            h2, w2 = shape
            spread = np.where(counts > 0, g / np.maximum(counts, 1), 0.0)
            up = np.zeros(fine_shape)
            up[: 2 * h2, : 2 * w2] = np.repeat(np.repeat(spread, 2, axis=0), 2, axis=1)
            up *= fine_mask
            grad = up
        else:
            grad = g * m
    return grad


def depth_loss(rendered: np.ndarray, prior: np.ndarray, valid: np.ndarray,
               weights: LossWeights | None = None,
               alignment: DepthAlignment | None = None):
    """Scale-shift-invariant depth objective.

    Data term: mean squared aligned residual over valid pixels.  Regularizer:
    multi-scale mean absolute forward differences of the residual.  Gradients
    flow through the least-squares (s, t) via implicit differentiation.

    Returns (value, dL/drendered, alignment, flags).
    """
    if weights is None:
        weights = LossWeights()
    d_hat = np.asarray(rendered, dtype=np.float64)
    d = np.asarray(prior, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    nv = int(valid.sum())
    flags: dict[str, bool] = {}
    if nv == 0:
        flags["no_valid_pixels"] = True
        return 0.0, np.zeros_like(d_hat), DepthAlignment(0.0, 0.0, True), flags
    if alignment is None:
        alignment = align_depth(d_hat, d, valid)
    if alignment.degenerate:
        flags["degenerate_alignment"] = True
    s, t = alignment.s, alignment.t

    res = np.where(valid, s * d_hat + t - d, 0.0)
    data = float(np.sum(res[valid] ** 2)) / nv
    grad_val, caches = _grad_term_forward(res, valid)
    value = data + weights.lambda_grad * grad_val

    # dL/dresidual
    d_res = 2.0 * res / nv
    d_res += weights.lambda_grad * _grad_term_backward(caches)
    d_res *= valid

    grad = s * d_res
    if not alignment.degenerate:
        # implicit path through the normal equations for (s, t)
        dL_ds = float(np.sum(d_res * d_hat))
        dL_dt = float(np.sum(d_res))
        hv = d_hat[valid]
        n = nv
        A = np.array([[float(np.sum(hv * hv)), float(np.sum(hv))],
                      [float(np.sum(hv)), float(n)]])
        y = np.linalg.solve(A, np.array([dL_ds, dL_dt]))
        rhs0 = np.where(valid, d - 2.0 * s * d_hat - t, 0.0)
        grad = grad + y[0] * rhs0 + y[1] * (-s) * valid
    return value, grad, alignment, flags


# ---------------------------------------------------------------------------
# normal prior
# ---------------------------------------------------------------------------

def normal_loss(rendered: np.ndarray, prior: np.ndarray, valid: np.ndarray,
                weights: LossWeights | None = None):
    """L1 plus cosine angular penalty between rendered and prior normals.

    Pixels whose rendered normal has near-zero norm are excluded.  Returns
    (value, dL/drendered).
    """
    if weights is None:
        weights = LossWeights()
    n_map = np.asarray(rendered, dtype=np.float64)
    n_hat = np.asarray(prior, dtype=np.float64)
    norms = np.linalg.norm(n_map, axis=-1)
    use = np.asarray(valid, dtype=bool) & (norms >= 1e-6)
    nv = int(use.sum())
    grad = np.zeros_like(n_map)
    if nv == 0:
        return 0.0, grad
    N = n_map[use]
    Nh = n_hat[use]
    nn = norms[use][:, None]
    nh_norm = np.linalg.norm(Nh, axis=-1, keepdims=True)
    diff = N - Nh
    l1 = float(np.abs(diff).sum()) / nv
    dot = np.sum(N * Nh, axis=-1, keepdims=True)
    cosv = dot / (nn * nh_norm)
    cos_term = float(np.sum(1.0 - cosv)) / nv
    value = weights.lambda_1 * l1 + weights.lambda_cos * cos_term

    g = weights.lambda_1 * np.sign(diff) / nv
    # d(1 - cos)/dN = -(Nh/(|N||Nh|) - dot * N / (|N|^3 |Nh|))
    g += -weights.lambda_cos / nv * (Nh / (nn * nh_norm) - dot * N / (nn ** 3 * nh_norm))
    grad[use] = g
    return value, grad


# ---------------------------------------------------------------------------
# multi-view consistency
# ---------------------------------------------------------------------------

def plane_homography(K_r: np.ndarray, K_n: np.ndarray, R_rn: np.ndarray,
                     T_rn: np.ndarray, normal_r: np.ndarray, depth_r: float,
                     pixel_r: np.ndarray) -> np.ndarray:
    """Homography induced by the local plane at one reference pixel.

    The plane passes through the back-projected point of ``pixel_r`` at
    ``depth_r`` with camera-space normal ``normal_r``; the plane offset is
    reconstructed from these.  Output is normalized so H[2, 2] = 1 when
    that entry is nonzero.
    """
    K_r = np.asarray(K_r, dtype=np.float64)
    K_n = np.asarray(K_n, dtype=np.float64)
    n = np.asarray(normal_r, dtype=np.float64).reshape(3)
    p = np.asarray(pixel_r, dtype=np.float64).reshape(2)
    K_r_inv = np.linalg.inv(K_r)
    x_cam = depth_r * (K_r_inv @ np.array([p[0], p[1], 1.0]))
    # plane offset: positive distance when the normal faces the camera
    d = float(-(n @ x_cam))
    if abs(d) < 1e-8:
        raise ValueError("degenerate plane: offset along the ray is zero")
    H = K_n @ (np.asarray(R_rn, float) - np.outer(np.asarray(T_rn, float), n) / d) @ K_r_inv
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def ncc(patch_a: np.ndarray, patch_b: np.ndarray, eps: float = 1e-12):
    """Normalized cross-correlation of two flat patches, or None when either
    patch has (near-)zero variance."""
    a = np.asarray(patch_a, dtype=np.float64).ravel()
    b = np.asarray(patch_b, dtype=np.float64).ravel()
    ac = a - a.mean()
    bc = b - b.mean()
    va = float(np.sum(ac * ac))
    vb = float(np.sum(bc * bc))
    if va < eps or vb < eps:
        return None
    return float(np.sum(ac * bc) / np.sqrt(va * vb))


def to_grayscale(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def select_neighbor_view(cameras: list, ref_index: int,
                         max_angle_deg: float = 30.0) -> int | None:
    """Nearest-center training view with viewing-direction angle below the cap."""
    ref = cameras[ref_index]
    ref_center = ref.center()
    ref_dir = ref.R_wc[2]
    best = None
    best_dist = np.inf
    cos_cap = np.cos(np.deg2rad(max_angle_deg))
    for i, cam in enumerate(cameras):
        if i == ref_index:
            continue
        if float(ref_dir @ cam.R_wc[2]) < cos_cap:
            continue
        dist = float(np.linalg.norm(cam.center() - ref_center))
        if dist < best_dist:
            best_dist = dist
            best = i
    return best


def _bilinear_setup(xy: np.ndarray, h: int, w: int):
    """Corner indices and weights for sampling maps at half-integer centers."""
    xf = np.clip(xy[:, 0] - 0.5, 0.0, w - 1.0)
    yf = np.clip(xy[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xf).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(xf), np.int64)
    y0 = np.clip(np.floor(yf).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(yf), np.int64)
    ax = xf - x0
    ay = yf - y0
    wts = np.stack([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay], axis=1)
    rows = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    cols = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    return rows, cols, wts, ax, ay


def _bilinear_sample(arr: np.ndarray, rows, cols, wts):
    vals = arr[rows, cols]
    if vals.ndim == 3:
        return np.einsum("nc,nck->nk", wts, vals, optimize=False)
    return np.sum(wts * vals, axis=1)


@dataclass
class MvPlan:
    """Frozen sampling decisions of one multi-view loss evaluation, kept so a
    re-evaluation differentiates the same surrogate objective."""

    rows_r: np.ndarray
    cols_r: np.ndarray
    nbr_rows: np.ndarray
    nbr_cols: np.ndarray
    nbr_wts: np.ndarray
    ray_n: np.ndarray
    geo_valid: np.ndarray
    pho_valid: np.ndarray
    flip_r: np.ndarray
    flip_n: np.ndarray


def _relative_pose(cam_r, cam_n):
    R_rn = cam_n.R_wc @ cam_r.R_wc.T
    T_rn = cam_n.t_wc - R_rn @ cam_r.t_wc
    return R_rn, T_rn


def mv_consistency_loss(ref_frame, nbr_frame, render_r, render_n,
                        config: MvConfig | None = None,
                        weights: LossWeights | None = None,
                        plan: MvPlan | None = None):
    """Two-view geometric and photometric consistency.

    Pixels on a stride grid with confident alpha are forward-projected with
    the plane-induced homography from the reference render's depth/normal,
    then projected back through the neighbor's sampled depth/normal; the
    round-trip error forms the geometric term, and NCC of grayscale patches
    warped by the forward homography forms the photometric term.

    Gradients flow into the sampled depth/normal values of both renders;
    the pixel locations used to read the neighbor's maps are treated as
    constants (straight-through warps).  Returns
    (value, {"r": {...}, "n": {...}}, flags, plan).
    """
    if config is None:
        config = MvConfig()
    if weights is None:
        weights = LossWeights()
    cam_r, cam_n = ref_frame.camera, nbr_frame.camera
    h, w = cam_r.height, cam_r.width
    hn, wn = cam_n.height, cam_n.width
    gray_r = to_grayscale(ref_frame.image)
    gray_n = to_grayscale(nbr_frame.image)
    rad = config.patch_radius

    grads = {
        "r": {"depth": np.zeros((h, w)), "normal": np.zeros((h, w, 3))},
        "n": {"depth": np.zeros((hn, wn)), "normal": np.zeros((hn, wn, 3))},
    }
    flags: dict[str, bool] = {}

    if plan is None:
        rr = np.arange(rad, h - rad, config.sample_stride)
        cc = np.arange(rad, w - rad, config.sample_stride)
        rows_r, cols_r = np.meshgrid(rr, cc, indexing="ij")
        rows_r = rows_r.ravel()
        cols_r = cols_r.ravel()
        sel = render_r.alpha[rows_r, cols_r] > 0.5
        rows_r, cols_r = rows_r[sel], cols_r[sel]
    else:
        rows_r, cols_r = plan.rows_r, plan.cols_r

    m = rows_r.size
    if m == 0:
        flags["no_samples"] = True
        return 0.0, grads, flags, MvPlan(rows_r, cols_r, np.empty((0, 4), np.int64),
                                         np.empty((0, 4), np.int64), np.empty((0, 4)),
                                         np.empty((0, 3)), np.zeros(0, bool),
                                         np.zeros(0, bool), np.empty(0), np.empty(0))

    K_r_inv = np.linalg.inv(cam_r.K)
    K_n_inv = np.linalg.inv(cam_n.K)
    R_rn, T_rn = _relative_pose(cam_r, cam_n)
    R_nr, T_nr = _relative_pose(cam_n, cam_r)
    B_r = cam_n.K @ T_rn            # K_n T_rn, reused by the H_rn chain
    B_n = cam_r.K @ T_nr

    px = cols_r.astype(np.float64) + 0.5
    py = rows_r.astype(np.float64) + 0.5
    p_tilde = np.stack([px, py, np.ones(m)], axis=1)

    depth_r = render_r.depth[rows_r, cols_r]
    raw_n_r = render_r.normal[rows_r, cols_r]
    nr_norm = np.linalg.norm(raw_n_r, axis=1)
    ok = (depth_r > 1e-6) & (nr_norm > 1e-6)
    safe_nr = np.where(nr_norm > 0, nr_norm, 1.0)[:, None]
    n_hat_r = raw_n_r / safe_nr
    ray_r = p_tilde @ K_r_inv.T
    if plan is None:
        flip_r = np.where(np.sum(n_hat_r * ray_r, axis=1) > 0, -1.0, 1.0)
    else:
        flip_r = plan.flip_r
    n_r = n_hat_r * flip_r[:, None]
    # the chain treats the plane offset as n . x_eff with x_eff = -X so the
    # stored value is the positive plane distance for camera-facing normals
    x_r = -(depth_r[:, None] * ray_r)
    ray_r_eff = -ray_r
    d_r = np.sum(n_r * x_r, axis=1)
    ok &= np.abs(d_r) > 1e-8
    safe_dr = np.where(np.abs(d_r) > 0, d_r, 1.0)

    # forward homography per sample: H_rn = K_n R_rn K_r^-1 - B_r n_r^T K_r^-1 / d_r
    base_rn = cam_n.K @ R_rn @ K_r_inv
    H_rn = base_rn[None] - (B_r[None, :, None] * n_r[:, None, :]) / safe_dr[:, None, None] @ K_r_inv
    q_tilde = np.einsum("nij,nj->ni", H_rn, p_tilde, optimize=False)
    ok &= q_tilde[:, 2] > 1e-9
    safe_qz = np.where(np.abs(q_tilde[:, 2]) > 0, q_tilde[:, 2], 1.0)
    q_xy = q_tilde[:, :2] / safe_qz[:, None]
    in_bounds = (q_xy[:, 0] >= 0.5) & (q_xy[:, 0] <= wn - 0.5) & \
                (q_xy[:, 1] >= 0.5) & (q_xy[:, 1] <= hn - 0.5)
    ok &= in_bounds

    # neighbor reads at the forward-projected locations (frozen weights)
    if plan is None:
        nbr_rows, nbr_cols, nbr_wts, _, _ = _bilinear_setup(q_xy, hn, wn)
    else:
        nbr_rows, nbr_cols, nbr_wts = plan.nbr_rows, plan.nbr_cols, plan.nbr_wts
    alpha_n = _bilinear_sample(render_n.alpha, nbr_rows, nbr_cols, nbr_wts)
    depth_n = _bilinear_sample(render_n.depth, nbr_rows, nbr_cols, nbr_wts)
    raw_n_n = _bilinear_sample(render_n.normal, nbr_rows, nbr_cols, nbr_wts)
    nn_norm = np.linalg.norm(raw_n_n, axis=1)
    ok &= (alpha_n > 0.5) & (depth_n > 1e-6) & (nn_norm > 1e-6)
    safe_nn = np.where(nn_norm > 0, nn_norm, 1.0)[:, None]
    n_hat_n = raw_n_n / safe_nn
    if plan is None:
        q_center = np.stack([q_xy[:, 0], q_xy[:, 1], np.ones(m)], axis=1)
        ray_n = q_center @ K_n_inv.T
        flip_n = np.where(np.sum(n_hat_n * ray_n, axis=1) > 0, -1.0, 1.0)
    else:
        ray_n = plan.ray_n
        flip_n = plan.flip_n
    n_n = n_hat_n * flip_n[:, None]
    x_n = -(depth_n[:, None] * ray_n)
    ray_n_eff = -ray_n
    d_n = np.sum(n_n * x_n, axis=1)
    ok &= np.abs(d_n) > 1e-8
    safe_dn = np.where(np.abs(d_n) > 0, d_n, 1.0)

    base_nr = cam_r.K @ R_nr @ K_n_inv
    H_nr = base_nr[None] - (B_n[None, :, None] * n_n[:, None, :]) / safe_dn[:, None, None] @ K_n_inv
    c_tilde = np.einsum("nij,nj->ni", H_nr, q_tilde, optimize=False)
    ok &= np.abs(c_tilde[:, 2]) > 1e-9
    safe_cz = np.where(np.abs(c_tilde[:, 2]) > 0, c_tilde[:, 2], 1.0)
    p_back = c_tilde[:, :2] / safe_cz[:, None]
    resid = np.stack([px, py], axis=1) - p_back
    phi = np.linalg.norm(resid, axis=1)

    if plan is None:
        geo_valid = ok & (phi < config.tau_geo)
    else:
        geo_valid = plan.geo_valid
    n_geo = int(geo_valid.sum())
    if n_geo == 0:
        flags["empty_valid_set"] = True
        new_plan = MvPlan(rows_r, cols_r, nbr_rows, nbr_cols, nbr_wts, ray_n,
                          geo_valid, np.zeros(m, bool), flip_r, flip_n)
        return 0.0, grads, flags, new_plan

    l_geo = float(phi[geo_valid].sum()) / n_geo

    # -- geometric term backward ------------------------------------------
    gsel = np.flatnonzero(geo_valid)
    coef = weights.lambda_geo / n_geo
    safe_phi = np.where(phi[gsel] > 1e-12, phi[gsel], 1.0)
    d_pback = coef * (p_back[gsel] - np.stack([px, py], axis=1)[gsel]) / safe_phi[:, None]
    # through the perspective division of c_tilde
    cz = safe_cz[gsel]
    G_c = np.zeros((gsel.size, 3))
    G_c[:, 0] = d_pback[:, 0] / cz
    G_c[:, 1] = d_pback[:, 1] / cz
    G_c[:, 2] = -(d_pback[:, 0] * p_back[gsel, 0] + d_pback[:, 1] * p_back[gsel, 1]) / cz
    # c_tilde = H_nr q_tilde
    dH_nr = G_c[:, :, None] * q_tilde[gsel][:, None, :]
    d_qtilde = np.einsum("nji,nj->ni", H_nr[gsel], G_c, optimize=False)
    dH_rn_geo = d_qtilde[:, :, None] * p_tilde[gsel][:, None, :]

    def h_chain(dH, B, K_inv, n_vec, d_plane, x_cam, ray, raw_norm, flip):
        """Backward of H = base - B n^T K_inv / d with d = n . x, x = depth*ray.

        Returns (d_depth, d_rawnormal) w.r.t. the sampled depth and the raw
        (pre-normalization) sampled normal.
        """
        tmp = np.einsum("ij,nkj,k->ni", K_inv, dH, B, optimize=False)
        # <dH, d(-B n^T Kinv / d)>:  dL/dn = -tmp/d,  dL/dd = n.tmp / d^2
        g_n = -tmp / d_plane[:, None]
        g_d = np.sum(n_vec * tmp, axis=1) / d_plane ** 2
        # d = n . x adds x to the normal path and n . ray to the depth path
        g_n = g_n + g_d[:, None] * x_cam
        g_depth = g_d * np.sum(n_vec * ray, axis=1)
        # normal normalization and flip
        nrm = np.linalg.norm(raw_norm, axis=1, keepdims=True)
        n_hat = raw_norm / nrm
        g_hat = g_n * flip[:, None]
        g_raw = (g_hat - n_hat * np.sum(n_hat * g_hat, axis=1, keepdims=True)) / nrm
        return g_depth, g_raw

    g_depth_r, g_raw_r = h_chain(dH_rn_geo, B_r, K_r_inv, n_r[gsel], safe_dr[gsel],
                                 x_r[gsel], ray_r_eff[gsel], raw_n_r[gsel], flip_r[gsel])
    np.add.at(grads["r"]["depth"], (rows_r[gsel], cols_r[gsel]), g_depth_r)
    np.add.at(grads["r"]["normal"], (rows_r[gsel], cols_r[gsel]), g_raw_r)

    g_depth_n, g_raw_n = h_chain(dH_nr, B_n, K_n_inv, n_n[gsel], safe_dn[gsel],
                                 x_n[gsel], ray_n_eff[gsel], raw_n_n[gsel], flip_n[gsel])
    for c in range(4):
        np.add.at(grads["n"]["depth"], (nbr_rows[gsel, c], nbr_cols[gsel, c]),
                  g_depth_n * nbr_wts[gsel, c])
        np.add.at(grads["n"]["normal"], (nbr_rows[gsel, c], nbr_cols[gsel, c]),
                  g_raw_n * nbr_wts[gsel, c][:, None])

    # -- photometric term ---------------------------------------------------
    offs = np.arange(-rad, rad + 1)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    ox = ox.ravel()
    oy = oy.ravel()
    n_patch = ox.size

    l_pho = 0.0
    pho_valid = np.zeros(m, dtype=bool)
    dH_rn_pho = np.zeros((m, 3, 3))
    if weights.lambda_pho > 0:
        psel = gsel
        ref_patches = gray_r[rows_r[psel][:, None] + oy[None, :],
                             cols_r[psel][:, None] + ox[None, :]]
        u_t = np.stack([px[psel][:, None] + ox[None, :],
                        py[psel][:, None] + oy[None, :],
                        np.ones((psel.size, n_patch))], axis=2)
        t_tilde = np.einsum("nij,npj->npi", H_rn[psel], u_t, optimize=False)
        tz = t_tilde[:, :, 2]
        good_z = np.all(tz > 1e-9, axis=1)
        tz_safe = np.where(np.abs(tz) > 0, tz, 1.0)
        t_xy = t_tilde[:, :, :2] / tz_safe[:, :, None]
        # whole patch must land inside the neighbor's bilinear support
        good_z &= np.all((t_xy[:, :, 0] >= 0.5) & (t_xy[:, :, 0] <= wn - 0.5)
                         & (t_xy[:, :, 1] >= 0.5) & (t_xy[:, :, 1] <= hn - 0.5), axis=1)
        flat_xy = t_xy.reshape(-1, 2)
        prow, pcol, pwts, pax, pay = _bilinear_setup(flat_xy, hn, wn)
        nbr_patch = _bilinear_sample(gray_n, prow, pcol, pwts).reshape(psel.size, n_patch)

        a_c = ref_patches - ref_patches.mean(axis=1, keepdims=True)
        b_c = nbr_patch - nbr_patch.mean(axis=1, keepdims=True)
        va = np.sum(a_c * a_c, axis=1)
        vb = np.sum(b_c * b_c, axis=1)
        var_ok = (va > 1e-12) & (vb > 1e-12) & good_z
        if plan is None:
            pho_sel = var_ok
        else:
            pho_sel = plan.pho_valid[psel]
        n_pho = int(pho_sel.sum())
        if n_pho:
            sa = np.sqrt(np.where(var_ok, va, 1.0))
            sb = np.sqrt(np.where(var_ok, vb, 1.0))
            ncc_val = np.sum(a_c * b_c, axis=1) / (sa * sb)
            l_pho = float(np.sum((1.0 - ncc_val)[pho_sel])) / n_pho

            # d(1 - ncc)/d(neighbor patch values)
            g_b = -(a_c / (sa * sb)[:, None] - ncc_val[:, None] * b_c / (sb ** 2)[:, None])
            g_b -= g_b.mean(axis=1, keepdims=True)
            g_b *= (weights.lambda_pho / n_pho) * pho_sel[:, None]

            # bilinear image gradient at the warped sample points
            corner = gray_n[prow, pcol]
            gx = ((1 - pay) * (corner[:, 1] - corner[:, 0])
                  + pay * (corner[:, 3] - corner[:, 2]))
            gy = ((1 - pax) * (corner[:, 2] - corner[:, 0])
                  + pax * (corner[:, 3] - corner[:, 1]))
            g_b_flat = g_b.reshape(-1)
            d_txy = np.stack([g_b_flat * gx, g_b_flat * gy], axis=1).reshape(psel.size, n_patch, 2)
            # through the perspective division of t_tilde
            G_t = np.zeros((psel.size, n_patch, 3))
            G_t[:, :, 0] = d_txy[:, :, 0] / tz_safe
            G_t[:, :, 1] = d_txy[:, :, 1] / tz_safe
            G_t[:, :, 2] = -(d_txy[:, :, 0] * t_xy[:, :, 0] + d_txy[:, :, 1] * t_xy[:, :, 1]) / tz_safe
            dH_rn_pho[psel] = np.einsum("npi,npj->nij", G_t, u_t, optimize=False)

            g_depth_r2, g_raw_r2 = h_chain(dH_rn_pho[psel], B_r, K_r_inv, n_r[psel],
                                           safe_dr[psel], x_r[psel], ray_r_eff[psel],
                                           raw_n_r[psel], flip_r[psel])
            np.add.at(grads["r"]["depth"], (rows_r[psel], cols_r[psel]), g_depth_r2)
            np.add.at(grads["r"]["normal"], (rows_r[psel], cols_r[psel]), g_raw_r2)
        else:
            flags["no_photometric_samples"] = True
        pho_valid = np.zeros(m, dtype=bool)
        pho_valid[psel] = pho_sel

    value = weights.lambda_geo * l_geo + weights.lambda_pho * l_pho
    new_plan = MvPlan(rows_r, cols_r, nbr_rows, nbr_cols, nbr_wts, ray_n,
                      geo_valid, pho_valid, flip_r, flip_n)
    flags["l_geo"] = l_geo
    flags["l_pho"] = l_pho
    return value, grads, flags, new_plan


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------

def total_loss(terms: dict[str, float], weights: LossWeights | None = None) -> float:
    """Weighted sum of the term scalars; the multi-view term arrives already
    internally weighted."""
    if weights is None:
        weights = LossWeights()
    for name, val in terms.items():
        if val is not None and not np.isfinite(val):
            raise ValueError(f"non-finite loss term '{name}'")
    total = 0.0
    total += weights.lambda_rgb * terms.get("rgb", 0.0)
    total += weights.lambda_d * (terms.get("depth") or 0.0)
    total += weights.lambda_n * (terms.get("normal") or 0.0)
    total += terms.get("mv") or 0.0
    return total
