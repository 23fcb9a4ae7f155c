"""Numba kernels for the hot (splat, pixel) candidate pipeline.

Single-threaded, strict IEEE float semantics (no fastmath), so results are
reproducible run to run and independent of any thread-count environment.
Splats arrive pre-sorted by (center depth, uid); the fill pass therefore
lands each pixel's contributions already in canonical compositing order.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = ["count_pairs", "fill_pairs", "composite", "backward_pairs"]


@njit(cache=True)
def _eval_pair(M12, s, px, py, near, far, cutoff, inv2sig2, alpha, cx, cy):
    """Ray-splat evaluation for one candidate; returns
    (accept, u, v, z, G, obj_branch, w)."""
    m00 = M12[s, 0]; m01 = M12[s, 1]; m03 = M12[s, 2]
    m10 = M12[s, 3]; m11 = M12[s, 4]; m13 = M12[s, 5]
    m20 = M12[s, 6]; m21 = M12[s, 7]; m23 = M12[s, 8]
    m30 = M12[s, 9]; m31 = M12[s, 10]; m33 = M12[s, 11]
    hu0 = px * m30 - m00
    hu1 = px * m31 - m01
    hu3 = px * m33 - m03
    hv0 = py * m30 - m10
    hv1 = py * m31 - m11
    hv3 = py * m33 - m13
    denom = hu0 * hv1 - hu1 * hv0
    if abs(denom) < 1e-12:
        return False, 0.0, 0.0, 0.0, 0.0, False, 0.0
    u = (hu1 * hv3 - hu3 * hv1) / denom
    v = (hu3 * hv0 - hu0 * hv3) / denom
    z = m20 * u + m21 * v + m23
    if z < near or z > far:
        return False, 0.0, 0.0, 0.0, 0.0, False, 0.0
    g_obj = np.exp(-0.5 * (u * u + v * v))
    dx = px - cx
    dy = py - cy
    g_scr = np.exp(-(dx * dx + dy * dy) * inv2sig2)
    obj = g_obj >= g_scr
    G = g_obj if obj else g_scr
    w = alpha * G
    if w < cutoff:
        return False, 0.0, 0.0, 0.0, 0.0, False, 0.0
    return True, u, v, z, G, obj, w


@njit(cache=True)
def count_pairs(order, r0, r1, c0, c1, M12, alphas, cxy, width,
                near, far, cutoff, inv2sig2, counts):
    for si in range(order.size):
        s = order[si]
        a = alphas[s]
        cx = cxy[s, 0]
        cy = cxy[s, 1]
        for rr in range(r0[si], r1[si]):
            py = rr + 0.5
            base = rr * width
            for cc in range(c0[si], c1[si]):
                ok, u, v, z, G, obj, w = _eval_pair(
                    M12, s, cc + 0.5, py, near, far, cutoff, inv2sig2, a, cx, cy)
                if ok:
                    counts[base + cc] += 1


@njit(cache=True)
def fill_pairs(order, r0, r1, c0, c1, M12, alphas, cxy, width,
               near, far, cutoff, inv2sig2, fill_ptr,
               pair_splat, pair_pixel, pair_u, pair_v, pair_z, pair_w,
               pair_G, pair_obj):
    for si in range(order.size):
        s = order[si]
        a = alphas[s]
        cx = cxy[s, 0]
        cy = cxy[s, 1]
        for rr in range(r0[si], r1[si]):
            py = rr + 0.5
            base = rr * width
            for cc in range(c0[si], c1[si]):
                ok, u, v, z, G, obj, w = _eval_pair(
                    M12, s, cc + 0.5, py, near, far, cutoff, inv2sig2, a, cx, cy)
                if ok:
                    pix = base + cc
                    slot = fill_ptr[pix]
                    fill_ptr[pix] = slot + 1
                    pair_splat[slot] = s
                    pair_pixel[slot] = pix
                    pair_u[slot] = u
                    pair_v[slot] = v
                    pair_z[slot] = z
                    pair_w[slot] = w
                    pair_G[slot] = G
                    pair_obj[slot] = obj


@njit(cache=True)
def composite(offsets, pair_splat, pair_z, pair_w, colors, normals, floor,
              out_color, weight_sum, depth_num, normal_acc, final_T,
              pair_T, included):
    """Front-to-back alpha compositing per pixel, in stored (depth) order."""
    n_pix = offsets.size - 1
    for p in range(n_pix):
        T = 1.0
        for i in range(offsets[p], offsets[p + 1]):
            if T <= floor:
                break
            s = pair_splat[i]
            w = pair_w[i]
            wt = w * T
            pair_T[i] = T
            included[i] = True
            out_color[p, 0] += colors[s, 0] * wt
            out_color[p, 1] += colors[s, 1] * wt
            out_color[p, 2] += colors[s, 2] * wt
            weight_sum[p] += wt
            depth_num[p] += pair_z[i] * wt
            normal_acc[p, 0] += normals[s, 0] * wt
            normal_acc[p, 1] += normals[s, 1] * wt
            normal_acc[p, 2] += normals[s, 2] * wt
            T = T * (1.0 - w)
        final_T[p] = T


@njit(cache=True)
def backward_pairs(offsets, pair_splat, pair_u, pair_v, pair_z, pair_w,
                   pair_G, pair_obj, pair_T, included,
                   M12, alphas, colors, normals, cxy, width, inv2sig2,
                   g_color, g_depth_coef, depth_flat, gamma, g_alpha,
                   dM12, d_alpha_acc, d_color_acc, d_nacc, gxc, gyc):
    """Reverse compositing scan plus per-pair parameter chains.

    Per-pixel suffix recursions (division-free, exact even for w = 1):
        dL/dw_i = T_i * (phi_i - B + g_alpha * U)
        B <- phi_i w_i + (1 - w_i) B;   U <- (1 - w_i) U
    """
    n_pix = offsets.size - 1
    for p in range(n_pix):
        start = offsets[p]
        end = offsets[p + 1]
        if end == start:
            continue
        B = 0.0
        U = 1.0
        ga = g_alpha[p]
        gdc = g_depth_coef[p]
        dflat = depth_flat[p]
        gc0 = g_color[p, 0]; gc1 = g_color[p, 1]; gc2 = g_color[p, 2]
        gm0 = gamma[p, 0]; gm1 = gamma[p, 1]; gm2 = gamma[p, 2]
        px = (p % width) + 0.5
        py = (p // width) + 0.5
        for i in range(end - 1, start - 1, -1):
            if not included[i]:
                continue
            s = pair_splat[i]
            w = pair_w[i]
            T = pair_T[i]
            u = pair_u[i]
            v = pair_v[i]
            z = pair_z[i]
            G = pair_G[i]
            phi = (gc0 * colors[s, 0] + gc1 * colors[s, 1] + gc2 * colors[s, 2]
                   + gdc * (z - dflat)
                   + gm0 * normals[s, 0] + gm1 * normals[s, 1] + gm2 * normals[s, 2])
            dw = T * (phi - B + ga * U)
            B = phi * w + (1.0 - w) * B
            U = (1.0 - w) * U
            wt = w * T

            d_color_acc[s, 0] += gc0 * wt
            d_color_acc[s, 1] += gc1 * wt
            d_color_acc[s, 2] += gc2 * wt
            d_nacc[s, 0] += gm0 * wt
            d_nacc[s, 1] += gm1 * wt
            d_nacc[s, 2] += gm2 * wt
            d_alpha_acc[s] += dw * G
            dG = dw * alphas[s]

            du = 0.0
            dv = 0.0
            if pair_obj[i]:
                du = -u * G * dG
                dv = -v * G * dG
            else:
                d_d2 = -G * inv2sig2 * dG
                gxc[s] += d_d2 * (-2.0) * (px - cxy[s, 0])
                gyc[s] += d_d2 * (-2.0) * (py - cxy[s, 1])

            m20 = M12[s, 6]; m21 = M12[s, 7]
            dz = gdc * wt
            du += dz * m20
            dv += dz * m21

            m00 = M12[s, 0]; m01 = M12[s, 1]; m03 = M12[s, 2]
            m10 = M12[s, 3]; m11 = M12[s, 4]; m13 = M12[s, 5]
            m30 = M12[s, 9]; m31 = M12[s, 10]; m33 = M12[s, 11]
            hu0 = px * m30 - m00
            hu1 = px * m31 - m01
            hu3 = px * m33 - m03
            hv0 = py * m30 - m10
            hv1 = py * m31 - m11
            hv3 = py * m33 - m13
            denom = hu0 * hv1 - hu1 * hv0
            d_hu0 = (du * (-u * hv1) + dv * (-hv3 - v * hv1)) / denom
            d_hu1 = (du * (hv3 + u * hv0) + dv * (v * hv0)) / denom
            d_hu3 = (du * (-hv1) + dv * hv0) / denom
            d_hv0 = (du * (u * hu1) + dv * (hu3 + v * hu1)) / denom
            d_hv1 = (du * (-hu3 - u * hu0) + dv * (-v * hu0)) / denom
            d_hv3 = (du * hu1 + dv * (-hu0)) / denom

            dM12[s, 0] -= d_hu0
            dM12[s, 1] -= d_hu1
            dM12[s, 2] -= d_hu3
            dM12[s, 3] -= d_hv0
            dM12[s, 4] -= d_hv1
            dM12[s, 5] -= d_hv3
            dM12[s, 6] += dz * u
            dM12[s, 7] += dz * v
            dM12[s, 8] += dz
            dM12[s, 9] += px * d_hu0 + py * d_hv0
            dM12[s, 10] += px * d_hu1 + py * d_hv1
            dM12[s, 11] += px * d_hu3 + py * d_hv3
