"""Compiled splat compositing loops (forward and backward).

Both kernels walk the splats in one fixed depth order with per-pixel running
state, so arithmetic order never depends on threading and results are
reproducible bit for bit. fastmath stays off to keep IEEE semantics.

A splat touches the pixels inside its integer footprint rectangle whose
Mahalanobis distance stays within the footprint cutoff (3 sigma, tightened
to where alpha crosses the 1/255 skip threshold); alphas are additionally
capped at 0.999 and skipped below 1/255, matching the 3DGS conventions.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

ALPHA_CAP = 0.999
ALPHA_SKIP = 1.0 / 255.0


@njit(cache=True)
def composite_forward(mx, my, a00, a01, a11, opac, qmax, x0, x1, y0, y1,
                      colors, depth, rgb, tend, depth_acc):
    """Front-to-back compositing into rgb/tend/depth_acc (all (H, W[,3]) f64)."""
    k_count = mx.shape[0]
    for k in range(k_count):
        o = opac[k]
        qm = qmax[k]
        c0 = colors[k, 0]
        c1 = colors[k, 1]
        c2 = colors[k, 2]
        z = depth[k]
        b00 = a00[k]
        b01 = a01[k]
        b11 = a11[k]
        cx = mx[k]
        cy = my[k]
        for py in range(y0[k], y1[k] + 1):
            dy = py + 0.5 - cy
            for px in range(x0[k], x1[k] + 1):
                dx = px + 0.5 - cx
                q = b00 * dx * dx + 2.0 * b01 * dx * dy + b11 * dy * dy
                if q > qm:
                    continue
                alpha = o * math.exp(-0.5 * q)
                if alpha > ALPHA_CAP:
                    alpha = ALPHA_CAP
                if alpha < ALPHA_SKIP:
                    continue
                t = tend[py, px]
                w = alpha * t
                rgb[py, px, 0] += w * c0
                rgb[py, px, 1] += w * c1
                rgb[py, px, 2] += w * c2
                depth_acc[py, px] += w * z
                tend[py, px] = t * (1.0 - alpha)


@njit(cache=True)
def composite_backward(mx, my, a00, a01, a11, opac, qmax, x0, x1, y0, y1,
                       colors, adj, bg, tend_final, tcur, suffix,
                       d_opac, d_mx, d_my, d_a00, d_a01, d_a11, d_col):
    """Back-to-front accumulation of per-splat cotangents.

    tcur must enter as a copy of tend_final; suffix as zeros (H, W, 3). The
    transmittance before each splat is recovered by dividing out (1 - alpha),
    mirroring the forward pass exactly (alpha <= 0.999 keeps this stable).
    """
    k_count = mx.shape[0]
    for k in range(k_count - 1, -1, -1):
        o = opac[k]
        qm = qmax[k]
        c0 = colors[k, 0]
        c1 = colors[k, 1]
        c2 = colors[k, 2]
        b00 = a00[k]
        b01 = a01[k]
        b11 = a11[k]
        cx = mx[k]
        cy = my[k]
        acc_o = 0.0
        acc_mx = 0.0
        acc_my = 0.0
        acc_a00 = 0.0
        acc_a01 = 0.0
        acc_a11 = 0.0
        acc_c0 = 0.0
        acc_c1 = 0.0
        acc_c2 = 0.0
        for py in range(y0[k], y1[k] + 1):
            dy = py + 0.5 - cy
            for px in range(x0[k], x1[k] + 1):
                dx = px + 0.5 - cx
                q = b00 * dx * dx + 2.0 * b01 * dx * dy + b11 * dy * dy
                if q > qm:
                    continue
                g = math.exp(-0.5 * q)
                raw_alpha = o * g
                alpha = raw_alpha
                if alpha > ALPHA_CAP:
                    alpha = ALPHA_CAP
                if alpha < ALPHA_SKIP:
                    continue
                om = 1.0 - alpha
                ti = tcur[py, px] / om
                w = alpha * ti
                a0 = adj[py, px, 0]
                a1 = adj[py, px, 1]
                a2 = adj[py, px, 2]
                acc_c0 += a0 * w
                acc_c1 += a1 * w
                acc_c2 += a2 * w
                te = tend_final[py, px]
                d_alpha = (
                    a0 * (c0 * ti - (suffix[py, px, 0] + bg[0] * te) / om)
                    + a1 * (c1 * ti - (suffix[py, px, 1] + bg[1] * te) / om)
                    + a2 * (c2 * ti - (suffix[py, px, 2] + bg[2] * te) / om)
                )
                if raw_alpha < ALPHA_CAP:
                    acc_o += d_alpha * g
                    dq = -0.5 * d_alpha * o * g
                    gx = b00 * dx + b01 * dy
                    gy = b01 * dx + b11 * dy
                    acc_mx += dq * (-2.0 * gx)
                    acc_my += dq * (-2.0 * gy)
                    acc_a00 += dq * dx * dx
                    acc_a01 += dq * dx * dy
                    acc_a11 += dq * dy * dy
                suffix[py, px, 0] += w * c0
                suffix[py, px, 1] += w * c1
                suffix[py, px, 2] += w * c2
                tcur[py, px] = ti
        d_opac[k] = acc_o
        d_mx[k] = acc_mx
        d_my[k] = acc_my
        d_a00[k] = acc_a00
        d_a01[k] = acc_a01
        d_a11[k] = acc_a11
        d_col[k, 0] = acc_c0
        d_col[k, 1] = acc_c1
        d_col[k, 2] = acc_c2


def footprint_rect(mx: np.ndarray, my: np.ndarray, radius: np.ndarray,
                   width: int, height: int):
    """Integer pixel rectangle per splat; empty rectangles come out inverted."""
    x0 = np.maximum(np.ceil(mx - radius - 0.5), 0.0).astype(np.int64)
    x1 = np.minimum(np.floor(mx + radius - 0.5), width - 1.0).astype(np.int64)
    y0 = np.maximum(np.ceil(my - radius - 0.5), 0.0).astype(np.int64)
    y1 = np.minimum(np.floor(my + radius - 0.5), height - 1.0).astype(np.int64)
    return x0, x1, y0, y1


_Y0 = 0.28209479177387814
_Y1 = 0.4886025119029199
_Y2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_Y3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


@njit(cache=True)
def _basis_into(x, y, z, b):
    xx = x * x
    yy = y * y
    zz = z * z
    b[0] = _Y0
    b[1] = -_Y1 * y
    b[2] = -_Y1 * z
    b[3] = -_Y1 * x
    b[4] = _Y2[0] * x * y
    b[5] = _Y2[1] * y * z
    b[6] = _Y2[2] * (2.0 * zz - xx - yy)
    b[7] = _Y2[3] * x * z
    b[8] = _Y2[4] * (xx - yy)
    b[9] = _Y3[0] * y * (3.0 * xx - yy)
    b[10] = _Y3[1] * x * y * z
    b[11] = _Y3[2] * y * (4.0 * zz - xx - yy)
    b[12] = _Y3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[13] = _Y3[4] * x * (4.0 * zz - xx - yy)
    b[14] = _Y3[5] * z * (xx - yy)
    b[15] = _Y3[6] * x * (xx - yy)


@njit(cache=True)
def shade_forward(sh, dirs, craw):
    """craw[n, c] = 0.5 + sum_l basis_l(dir_n) sh[n, l, c] (pre-clamp)."""
    n = sh.shape[0]
    b = np.empty(16)
    for i in range(n):
        _basis_into(dirs[i, 0], dirs[i, 1], dirs[i, 2], b)
        for c in range(3):
            acc = 0.5
            for l in range(16):
                acc += b[l] * sh[i, l, c]
            craw[i, c] = acc


@njit(cache=True)
def shade_backward(sh, dirs, eff, d_sh, d_dir):
    """d_sh[n, l, c] = basis_l eff[n, c]; d_dir[n] = sum_lc eff sh d(basis)/d(dir)."""
    n = sh.shape[0]
    b = np.empty(16)
    gx = np.empty(16)
    gy = np.empty(16)
    gz = np.empty(16)
    for i in range(n):
        x = dirs[i, 0]
        y = dirs[i, 1]
        z = dirs[i, 2]
        _basis_into(x, y, z, b)
        xx = x * x
        yy = y * y
        zz = z * z
        for l in range(16):
            gx[l] = 0.0
            gy[l] = 0.0
            gz[l] = 0.0
        gy[1] = -_Y1
        gz[2] = -_Y1
        gx[3] = -_Y1
        gx[4] = _Y2[0] * y
        gy[4] = _Y2[0] * x
        gy[5] = _Y2[1] * z
        gz[5] = _Y2[1] * y
        gx[6] = _Y2[2] * (-2.0 * x)
        gy[6] = _Y2[2] * (-2.0 * y)
        gz[6] = _Y2[2] * (4.0 * z)
        gx[7] = _Y2[3] * z
        gz[7] = _Y2[3] * x
        gx[8] = _Y2[4] * (2.0 * x)
        gy[8] = _Y2[4] * (-2.0 * y)
        gx[9] = _Y3[0] * 6.0 * x * y
        gy[9] = _Y3[0] * (3.0 * xx - 3.0 * yy)
        gx[10] = _Y3[1] * y * z
        gy[10] = _Y3[1] * x * z
        gz[10] = _Y3[1] * x * y
        gx[11] = _Y3[2] * (-2.0 * x * y)
        gy[11] = _Y3[2] * (4.0 * zz - xx - 3.0 * yy)
        gz[11] = _Y3[2] * (8.0 * y * z)
        gx[12] = _Y3[3] * (-6.0 * x * z)
        gy[12] = _Y3[3] * (-6.0 * y * z)
        gz[12] = _Y3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        gx[13] = _Y3[4] * (4.0 * zz - 3.0 * xx - yy)
        gy[13] = _Y3[4] * (-2.0 * x * y)
        gz[13] = _Y3[4] * (8.0 * x * z)
        gx[14] = _Y3[5] * (2.0 * x * z)
        gy[14] = _Y3[5] * (-2.0 * y * z)
        gz[14] = _Y3[5] * (xx - yy)
        gx[15] = _Y3[6] * (3.0 * xx - yy)
        gy[15] = _Y3[6] * (-2.0 * x * y)
        ax = 0.0
        ay = 0.0
        az = 0.0
        for c in range(3):
            e = eff[i, c]
            if e != 0.0:
                for l in range(16):
                    d_sh[i, l, c] = b[l] * e
                    s = sh[i, l, c]
                    ax += e * s * gx[l]
                    ay += e * s * gy[l]
                    az += e * s * gz[l]
            else:
                for l in range(16):
                    d_sh[i, l, c] = 0.0
        d_dir[i, 0] = ax
        d_dir[i, 1] = ay
        d_dir[i, 2] = az
