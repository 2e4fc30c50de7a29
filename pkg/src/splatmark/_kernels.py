"""Numba kernels for the tile-based splatting rasterizer.

All geometry math runs in float64; image accumulation is float64 and the
public API downcasts at the end.  Forward and backward parallelize over
tiles; per-Gaussian gradient contributions are accumulated into per-tile
entry buffers and reduced serially in fixed entry order, so results are
bit-identical regardless of thread count.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

TILE = 16
NEAR_PLANE = 0.01
ALPHA_CLIP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_MIN = 1e-6
COV_DILATION = 0.3


@njit(cache=True)
def quat_to_rot(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    rot = np.empty((3, 3), dtype=np.float64)
    rot[0, 0] = 1 - 2 * (y * y + z * z)
    rot[0, 1] = 2 * (x * y - w * z)
    rot[0, 2] = 2 * (x * z + w * y)
    rot[1, 0] = 2 * (x * y + w * z)
    rot[1, 1] = 1 - 2 * (x * x + z * z)
    rot[1, 2] = 2 * (y * z - w * x)
    rot[2, 0] = 2 * (x * z - w * y)
    rot[2, 1] = 2 * (y * z + w * x)
    rot[2, 2] = 1 - 2 * (x * x + y * y)
    return rot


@njit(cache=True)
def preprocess(
    positions,
    quats,
    scales,
    cam_rot,
    cam_t,
    fx,
    fy,
    cx,
    cy,
    mean2d,
    depth,
    conic,
    radius,
    visible,
    p_cam_out,
    a_mat,
    b_mat,
    j_mat,
):
    n = positions.shape[0]
    for i in range(n):
        visible[i] = False
        p = positions[i]
        xc = cam_rot[0, 0] * p[0] + cam_rot[0, 1] * p[1] + cam_rot[0, 2] * p[2] + cam_t[0]
        yc = cam_rot[1, 0] * p[0] + cam_rot[1, 1] * p[1] + cam_rot[1, 2] * p[2] + cam_t[1]
        zc = cam_rot[2, 0] * p[0] + cam_rot[2, 1] * p[1] + cam_rot[2, 2] * p[2] + cam_t[2]
        depth[i] = zc
        if zc <= NEAR_PLANE:
            continue
        inv_z = 1.0 / zc
        mean2d[i, 0] = fx * xc * inv_z + cx
        mean2d[i, 1] = fy * yc * inv_z + cy
        p_cam_out[i, 0] = xc
        p_cam_out[i, 1] = yc
        p_cam_out[i, 2] = zc

        jm = j_mat[i]
        jm[0, 0] = fx * inv_z
        jm[0, 1] = 0.0
        jm[0, 2] = -fx * xc * inv_z * inv_z
        jm[1, 0] = 0.0
        jm[1, 1] = fy * inv_z
        jm[1, 2] = -fy * yc * inv_z * inv_z

        rot3 = quat_to_rot(quats[i])
        bm = b_mat[i]
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += cam_rot[r, k] * rot3[k, c]
                bm[r, c] = acc
        am = a_mat[i]
        for r in range(2):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += jm[r, k] * bm[k, c]
                am[r, c] = acc

        s = scales[i]
        cov_a = am[0, 0] ** 2 * s[0] ** 2 + am[0, 1] ** 2 * s[1] ** 2 + am[0, 2] ** 2 * s[2] ** 2
        cov_b = (
            am[0, 0] * am[1, 0] * s[0] ** 2
            + am[0, 1] * am[1, 1] * s[1] ** 2
            + am[0, 2] * am[1, 2] * s[2] ** 2
        )
        cov_c = am[1, 0] ** 2 * s[0] ** 2 + am[1, 1] ** 2 * s[1] ** 2 + am[1, 2] ** 2 * s[2] ** 2
        cov_a += COV_DILATION
        cov_c += COV_DILATION
        det = cov_a * cov_c - cov_b * cov_b
        if det <= 0:
            continue
        inv_det = 1.0 / det
        conic[i, 0] = cov_c * inv_det
        conic[i, 1] = -cov_b * inv_det
        conic[i, 2] = cov_a * inv_det
        mid = 0.5 * (cov_a + cov_c)
        disc = np.sqrt(max(mid * mid - det, 1e-12))
        radius[i] = np.ceil(3.0 * np.sqrt(mid + disc))
        visible[i] = True


@njit(cache=True)
def count_tile_pairs(visible, mean2d, radius, width, height):
    n = visible.shape[0]
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    total = 0
    for i in range(n):
        if not visible[i]:
            continue
        x0 = max(0, int((mean2d[i, 0] - radius[i]) // TILE))
        x1 = min(ntx, int((mean2d[i, 0] + radius[i]) // TILE) + 1)
        y0 = max(0, int((mean2d[i, 1] - radius[i]) // TILE))
        y1 = min(nty, int((mean2d[i, 1] + radius[i]) // TILE) + 1)
        if x1 > x0 and y1 > y0:
            total += (x1 - x0) * (y1 - y0)
    return total


@njit(cache=True)
def fill_tile_pairs(visible, mean2d, radius, width, height, pair_tile, pair_gauss):
    n = visible.shape[0]
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    k = 0
    for i in range(n):
        if not visible[i]:
            continue
        x0 = max(0, int((mean2d[i, 0] - radius[i]) // TILE))
        x1 = min(ntx, int((mean2d[i, 0] + radius[i]) // TILE) + 1)
        y0 = max(0, int((mean2d[i, 1] - radius[i]) // TILE))
        y1 = min(nty, int((mean2d[i, 1] + radius[i]) // TILE) + 1)
        for ty in range(y0, y1):
            for tx in range(x0, x1):
                pair_tile[k] = ty * ntx + tx
                pair_gauss[k] = i
                k += 1


@njit(cache=True, parallel=True)
def render_tiles(
    tile_starts,
    sorted_gauss,
    mean2d,
    conic,
    opacity,
    values,
    bg,
    width,
    height,
    image,
    alpha,
    dominant,
    dom_weight,
):
    ntx = (width + TILE - 1) // TILE
    ntiles = tile_starts.shape[0] - 1
    nch = values.shape[1]
    for tile in prange(ntiles):
        ty = tile // ntx
        tx = tile % ntx
        start = tile_starts[tile]
        end = tile_starts[tile + 1]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                sx = px + 0.5
                sy = py + 0.5
                trans = 1.0
                acc = np.zeros(nch, dtype=np.float64)
                best_w = 0.0
                best_idx = -1
                for k in range(start, end):
                    g = sorted_gauss[k]
                    dx = sx - mean2d[g, 0]
                    dy = sy - mean2d[g, 1]
                    power = (
                        -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                        - conic[g, 1] * dx * dy
                    )
                    if power > 0.0:
                        continue
                    a = opacity[g] * np.exp(power)
                    if a >= ALPHA_CLIP:
                        a = ALPHA_CLIP
                    if a < ALPHA_SKIP:
                        continue
                    w = a * trans
                    for c in range(nch):
                        acc[c] += values[g, c] * w
                    if w > best_w or (w == best_w and best_idx >= 0 and g < best_idx):
                        best_w = w
                        best_idx = g
                    trans *= 1.0 - a
                    if trans < T_MIN:
                        break
                for c in range(nch):
                    image[py, px, c] = acc[c] + bg[c] * trans
                alpha[py, px] = 1.0 - trans
                dominant[py, px] = best_idx
                dom_weight[py, px] = best_w


@njit(cache=True)
def _jacobian_terms(fx, fy, p_cam, g_j):
    """Contribution of the projection-Jacobian dependence to dL/dp_cam."""
    x, y, z = p_cam[0], p_cam[1], p_cam[2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    inv_z3 = inv_z2 * inv_z
    gx = g_j[0, 2] * (-fx * inv_z2)
    gy = g_j[1, 2] * (-fy * inv_z2)
    gz = (
        g_j[0, 0] * (-fx * inv_z2)
        + g_j[1, 1] * (-fy * inv_z2)
        + g_j[0, 2] * (2.0 * fx * x * inv_z3)
        + g_j[1, 2] * (2.0 * fy * y * inv_z3)
    )
    return gx, gy, gz


@njit(cache=True)
def chain_cotangent(
    gm0,
    gm1,
    gq0,
    gq1,
    gq2,
    conic_g,
    a_g,
    b_g,
    j_g,
    p_cam_g,
    s_g,
    q_g,
    cam_rot,
    fx,
    fy,
    out14,
):
    """Chain cotangents w.r.t. (mean2d, conic params) back to 3D parameters.

    conic params (a, b, c) parameterize the quadratic form
    power = -0.5 (a dx^2 + c dy^2) - b dx dy.  Writes position (0:3),
    rotation (7:11) and scale (11:14) gradients into out14 (accumulating).
    """
    # dL/dQ as a full symmetric matrix.
    gq = np.empty((2, 2), dtype=np.float64)
    gq[0, 0] = gq0
    gq[0, 1] = 0.5 * gq1
    gq[1, 0] = 0.5 * gq1
    gq[1, 1] = gq2
    q2 = np.empty((2, 2), dtype=np.float64)
    q2[0, 0] = conic_g[0]
    q2[0, 1] = conic_g[1]
    q2[1, 0] = conic_g[1]
    q2[1, 1] = conic_g[2]
    # dL/dSigma2d = -Q gQ Q  (adjoint of matrix inverse, symmetric case)
    tmp = q2 @ gq
    g_sigma = -(tmp @ q2)

    s2 = np.empty(3, dtype=np.float64)
    for k in range(3):
        s2[k] = s_g[k] * s_g[k]
    # dL/dA = 2 gSigma A diag(s^2)
    ga = 2.0 * (g_sigma @ a_g)
    for r in range(2):
        for c in range(3):
            ga[r, c] *= s2[c]
    # dL/ds_k = 2 s_k (A^T gSigma A)_kk
    for k in range(3):
        u0 = a_g[0, k]
        u1 = a_g[1, k]
        quad = (
            g_sigma[0, 0] * u0 * u0
            + (g_sigma[0, 1] + g_sigma[1, 0]) * u0 * u1
            + g_sigma[1, 1] * u1 * u1
        )
        out14[11 + k] += 2.0 * s_g[k] * quad
    # dL/dJ = dL/dA B^T ; dL/dB = J^T dL/dA
    g_j = np.empty((2, 3), dtype=np.float64)
    g_b = np.empty((3, 3), dtype=np.float64)
    for r in range(2):
        for c in range(3):
            acc = 0.0
            for k in range(3):
                acc += ga[r, k] * b_g[c, k]
            g_j[r, c] = acc
    for r in range(3):
        for c in range(3):
            g_b[r, c] = j_g[0, r] * ga[0, c] + j_g[1, r] * ga[1, c]
    # dL/dR3 = W^T dL/dB
    g_r3 = np.empty((3, 3), dtype=np.float64)
    for r in range(3):
        for c in range(3):
            acc = 0.0
            for k in range(3):
                acc += cam_rot[k, r] * g_b[k, c]
            g_r3[r, c] = acc
    # quaternion gradient via dR/dq, then projected onto the unit sphere
    w, x, y, z = q_g[0], q_g[1], q_g[2], q_g[3]
    gw = 2.0 * (
        -z * g_r3[0, 1]
        + y * g_r3[0, 2]
        + z * g_r3[1, 0]
        - x * g_r3[1, 2]
        - y * g_r3[2, 0]
        + x * g_r3[2, 1]
    )
    gx = 2.0 * (
        y * g_r3[0, 1]
        + z * g_r3[0, 2]
        + y * g_r3[1, 0]
        - 2.0 * x * g_r3[1, 1]
        - w * g_r3[1, 2]
        + z * g_r3[2, 0]
        + w * g_r3[2, 1]
        - 2.0 * x * g_r3[2, 2]
    )
    gy = 2.0 * (
        -2.0 * y * g_r3[0, 0]
        + x * g_r3[0, 1]
        + w * g_r3[0, 2]
        + x * g_r3[1, 0]
        + z * g_r3[1, 2]
        - w * g_r3[2, 0]
        + z * g_r3[2, 1]
        - 2.0 * y * g_r3[2, 2]
    )
    gz = 2.0 * (
        -2.0 * z * g_r3[0, 0]
        - w * g_r3[0, 1]
        + x * g_r3[0, 2]
        + w * g_r3[1, 0]
        - 2.0 * z * g_r3[1, 1]
        + y * g_r3[1, 2]
        + x * g_r3[2, 0]
        + y * g_r3[2, 1]
    )
    dot = gw * w + gx * x + gy * y + gz * z
    out14[7] += gw - dot * w
    out14[8] += gx - dot * x
    out14[9] += gy - dot * y
    out14[10] += gz - dot * z
    # position: through mean2d (J) and through J's dependence on p_cam
    gpx = j_g[0, 0] * gm0 + j_g[1, 0] * gm1
    gpy = j_g[0, 1] * gm0 + j_g[1, 1] * gm1
    gpz = j_g[0, 2] * gm0 + j_g[1, 2] * gm1
    jx, jy, jz = _jacobian_terms(fx, fy, p_cam_g, g_j)
    gpx += jx
    gpy += jy
    gpz += jz
    out14[0] += cam_rot[0, 0] * gpx + cam_rot[1, 0] * gpy + cam_rot[2, 0] * gpz
    out14[1] += cam_rot[0, 1] * gpx + cam_rot[1, 1] * gpy + cam_rot[2, 1] * gpz
    out14[2] += cam_rot[0, 2] * gpx + cam_rot[1, 2] * gpy + cam_rot[2, 2] * gpz


@njit(cache=True, parallel=True)
def backward_tiles(
    tile_starts,
    sorted_gauss,
    mean2d,
    conic,
    opacity,
    values,
    bg,
    width,
    height,
    grad_image,
    entry_value_grad,
    entry_mean_grad,
    entry_conic_grad,
    entry_opacity_grad,
    color_only,
):
    """Accumulate per-tile-entry cotangents for every rendered contribution.

    entry_* arrays are indexed by position in sorted_gauss; each tile's span
    is touched by exactly one thread.
    """
    ntx = (width + TILE - 1) // TILE
    ntiles = tile_starts.shape[0] - 1
    nch = values.shape[1]
    for tile in prange(ntiles):
        ty = tile // ntx
        tx = tile % ntx
        start = tile_starts[tile]
        end = tile_starts[tile + 1]
        if end == start:
            continue
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                sx = px + 0.5
                sy = py + 0.5
                # forward walk: final transmittance and last contributor
                trans = 1.0
                last = start - 1
                for k in range(start, end):
                    g = sorted_gauss[k]
                    dx = sx - mean2d[g, 0]
                    dy = sy - mean2d[g, 1]
                    power = (
                        -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                        - conic[g, 1] * dx * dy
                    )
                    if power > 0.0:
                        continue
                    a = opacity[g] * np.exp(power)
                    if a >= ALPHA_CLIP:
                        a = ALPHA_CLIP
                    if a < ALPHA_SKIP:
                        continue
                    last = k
                    trans *= 1.0 - a
                    if trans < T_MIN:
                        break
                # backward walk
                suffix = np.empty(nch, dtype=np.float64)
                for c in range(nch):
                    suffix[c] = bg[c] * trans
                t_after = trans
                for k in range(last, start - 1, -1):
                    g = sorted_gauss[k]
                    dx = sx - mean2d[g, 0]
                    dy = sy - mean2d[g, 1]
                    power = (
                        -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                        - conic[g, 1] * dx * dy
                    )
                    if power > 0.0:
                        continue
                    gauss = np.exp(power)
                    a_raw = opacity[g] * gauss
                    clipped = a_raw >= ALPHA_CLIP
                    a = ALPHA_CLIP if clipped else a_raw
                    if a < ALPHA_SKIP:
                        continue
                    t_before = t_after / (1.0 - a)
                    w = a * t_before
                    d_alpha = 0.0
                    for c in range(nch):
                        gy_c = grad_image[py, px, c]
                        entry_value_grad[k, c] += w * gy_c
                        d_alpha += gy_c * (
                            values[g, c] * t_before - suffix[c] / (1.0 - a)
                        )
                        suffix[c] += values[g, c] * w
                    t_after = t_before
                    if color_only or clipped:
                        continue
                    entry_opacity_grad[k] += gauss * d_alpha
                    d_power = a_raw * d_alpha
                    entry_mean_grad[k, 0] += d_power * (
                        conic[g, 0] * dx + conic[g, 1] * dy
                    )
                    entry_mean_grad[k, 1] += d_power * (
                        conic[g, 2] * dy + conic[g, 1] * dx
                    )
                    entry_conic_grad[k, 0] += d_power * (-0.5 * dx * dx)
                    entry_conic_grad[k, 1] += d_power * (-dx * dy)
                    entry_conic_grad[k, 2] += d_power * (-0.5 * dy * dy)


@njit(cache=True)
def reduce_entries(
    tile_starts,
    sorted_gauss,
    entry_value_grad,
    entry_mean_grad,
    entry_conic_grad,
    entry_opacity_grad,
    conic,
    a_mat,
    b_mat,
    j_mat,
    p_cam,
    scales,
    quats,
    cam_rot,
    fx,
    fy,
    grads14,
    color_only,
):
    """Serial reduction of per-entry cotangents into per-Gaussian gradients."""
    nch = entry_value_grad.shape[1]
    total = sorted_gauss.shape[0]
    for k in range(total):
        g = sorted_gauss[k]
        for c in range(nch):
            grads14[g, 3 + c] += entry_value_grad[k, c]
        if color_only:
            continue
        grads14[g, 6] += entry_opacity_grad[k]
        gm0 = entry_mean_grad[k, 0]
        gm1 = entry_mean_grad[k, 1]
        gq0 = entry_conic_grad[k, 0]
        gq1 = entry_conic_grad[k, 1]
        gq2 = entry_conic_grad[k, 2]
        if gm0 == 0.0 and gm1 == 0.0 and gq0 == 0.0 and gq1 == 0.0 and gq2 == 0.0:
            continue
        chain_cotangent(
            gm0,
            gm1,
            gq0,
            gq1,
            gq2,
            conic[g],
            a_mat[g],
            b_mat[g],
            j_mat[g],
            p_cam[g],
            scales[g],
            quats[g],
            cam_rot,
            fx,
            fy,
            grads14[g],
        )


@njit(cache=True)
def build_power_chains(
    visible,
    conic,
    a_mat,
    b_mat,
    j_mat,
    p_cam,
    scales,
    quats,
    cam_rot,
    fx,
    fy,
    pos_chain,
    scale_chain,
):
    """Per-Gaussian linear maps from (mean2d, conic) cotangents to position
    and scale cotangents; columns are the chain applied to unit vectors."""
    n = visible.shape[0]
    out = np.empty(14, dtype=np.float64)
    for i in range(n):
        if not visible[i]:
            continue
        for col in range(5):
            for k in range(14):
                out[k] = 0.0
            gm0 = 1.0 if col == 0 else 0.0
            gm1 = 1.0 if col == 1 else 0.0
            gq0 = 1.0 if col == 2 else 0.0
            gq1 = 1.0 if col == 3 else 0.0
            gq2 = 1.0 if col == 4 else 0.0
            chain_cotangent(
                gm0,
                gm1,
                gq0,
                gq1,
                gq2,
                conic[i],
                a_mat[i],
                b_mat[i],
                j_mat[i],
                p_cam[i],
                scales[i],
                quats[i],
                cam_rot,
                fx,
                fy,
                out,
            )
            for r in range(3):
                pos_chain[i, r, col] = out[r]
                scale_chain[i, r, col] = out[11 + r]


@njit(cache=True, parallel=True)
def fisher_tiles(
    tile_starts,
    sorted_gauss,
    mean2d,
    conic,
    opacity,
    values,
    bg,
    width,
    height,
    pos_chain,
    scale_chain,
    entry_acc,
):
    """Per-entry sums over pixels and channels of squared image partials.

    entry_acc columns: position (0:3), color (3:6), opacity (6), scale (7:10).
    """
    ntx = (width + TILE - 1) // TILE
    ntiles = tile_starts.shape[0] - 1
    nch = values.shape[1]
    for tile in prange(ntiles):
        ty = tile // ntx
        tx = tile % ntx
        start = tile_starts[tile]
        end = tile_starts[tile + 1]
        if end == start:
            continue
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                sx = px + 0.5
                sy = py + 0.5
                trans = 1.0
                last = start - 1
                for k in range(start, end):
                    g = sorted_gauss[k]
                    dx = sx - mean2d[g, 0]
                    dy = sy - mean2d[g, 1]
                    power = (
                        -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                        - conic[g, 1] * dx * dy
                    )
                    if power > 0.0:
                        continue
                    a = opacity[g] * np.exp(power)
                    if a >= ALPHA_CLIP:
                        a = ALPHA_CLIP
                    if a < ALPHA_SKIP:
                        continue
                    last = k
                    trans *= 1.0 - a
                    if trans < T_MIN:
                        break
                suffix = np.empty(nch, dtype=np.float64)
                for c in range(nch):
                    suffix[c] = bg[c] * trans
                t_after = trans
                for k in range(last, start - 1, -1):
                    g = sorted_gauss[k]
                    dx = sx - mean2d[g, 0]
                    dy = sy - mean2d[g, 1]
                    power = (
                        -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                        - conic[g, 1] * dx * dy
                    )
                    if power > 0.0:
                        continue
                    gauss = np.exp(power)
                    a_raw = opacity[g] * gauss
                    clipped = a_raw >= ALPHA_CLIP
                    a = ALPHA_CLIP if clipped else a_raw
                    if a < ALPHA_SKIP:
                        continue
                    t_before = t_after / (1.0 - a)
                    w = a * t_before
                    sum_wv2 = 0.0
                    for c in range(nch):
                        wv = values[g, c] * t_before - suffix[c] / (1.0 - a)
                        sum_wv2 += wv * wv
                        suffix[c] += values[g, c] * w
                        entry_acc[k, 3 + c] += w * w
                    t_after = t_before
                    if clipped:
                        continue
                    entry_acc[k, 6] += gauss * gauss * sum_wv2
                    # alpha sensitivity to geometry: d alpha/d theta = a * d power/d theta
                    pm0 = a_raw * (conic[g, 0] * dx + conic[g, 1] * dy)
                    pm1 = a_raw * (conic[g, 2] * dy + conic[g, 1] * dx)
                    pq0 = a_raw * (-0.5 * dx * dx)
                    pq1 = a_raw * (-dx * dy)
                    pq2 = a_raw * (-0.5 * dy * dy)
                    for r in range(3):
                        dp = (
                            pos_chain[g, r, 0] * pm0
                            + pos_chain[g, r, 1] * pm1
                            + pos_chain[g, r, 2] * pq0
                            + pos_chain[g, r, 3] * pq1
                            + pos_chain[g, r, 4] * pq2
                        )
                        entry_acc[k, r] += dp * dp * sum_wv2
                        ds = (
                            scale_chain[g, r, 2] * pq0
                            + scale_chain[g, r, 3] * pq1
                            + scale_chain[g, r, 4] * pq2
                        )
                        entry_acc[k, 7 + r] += ds * ds * sum_wv2


@njit(cache=True)
def reduce_fisher(sorted_gauss, entry_acc, accum):
    total = sorted_gauss.shape[0]
    ncol = entry_acc.shape[1]
    for k in range(total):
        g = sorted_gauss[k]
        for c in range(ncol):
            accum[g, c] += entry_acc[k, c]
