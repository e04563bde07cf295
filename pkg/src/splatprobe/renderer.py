"""Deterministic differentiable Gaussian splatting.

Covariances are kept factorized (scale + quaternion), projected with the EWA
perspective Jacobian, shaded with degree-3 spherical harmonics, and composited
front to back in a fixed order (depth ascending, ties by storage index).
`render_gradients` is the hand-derived vector-Jacobian product of `rasterize`
with respect to every cloud attribute, the camera pose (as a local se(3)
increment at the current pose), and the background color.

Compositing follows the 3DGS conventions: alpha cap 0.999, skip threshold
1/255, 2D blur floor 0.3, 3-sigma footprint (tightened to the radius where
alpha crosses the skip threshold, which cannot change the output). The
per-pixel loops run in compiled kernels with one canonical arithmetic order,
so images and gradients are bit-identical for any `threads` value; the flag
only caps auxiliary workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from splatprobe import _kernels
from splatprobe.defaults import (
    ALPHA_CAP,
    ALPHA_SKIP,
    BLUR_FLOOR,
    DEPTH_EPS,
    FOOTPRINT_SIGMA,
)
from splatprobe.errors import DataError, ShapeError
from splatprobe.geometry import CameraModel, quat_normalize_vjp, quat_to_rot, quat_to_rot_vjp

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


@dataclass
class GaussianCloud:
    """N anisotropic Gaussians: positions, opacities, scale/rotation factors,
    and 16x3 spherical-harmonic coefficients."""

    positions: np.ndarray   # (N, 3)
    opacities: np.ndarray   # (N,) in (0, 1)
    scales: np.ndarray      # (N, 3) positive
    rotations: np.ndarray   # (N, 4) unit quaternions
    sh: np.ndarray          # (N, 16, 3)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def validate(self, quat_tol: float | None = None):
        n = len(self)
        shapes = {
            "positions": (n, 3),
            "opacities": (n,),
            "scales": (n, 3),
            "rotations": (n, 4),
            "sh": (n, 16, 3),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise ShapeError(f"{name}: expected {want}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} has non-finite entries")
        if n == 0:
            return
        if np.any(self.opacities <= 0) or np.any(self.opacities >= 1):
            raise DataError("opacities must lie strictly inside (0, 1)")
        if np.any(self.scales <= 0):
            raise DataError("scales must be positive")
        if quat_tol is None:
            quat_tol = 1e-9 if self.rotations.dtype == np.float64 else 1e-5
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > quat_tol):
            raise DataError("rotations must be unit quaternions")

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(), self.opacities.copy(), self.scales.copy(),
            self.rotations.copy(), self.sh.copy(),
        )


@dataclass
class Splat2D:
    """Projected Gaussian: 2D mean in pixels, 2x2 covariance, camera depth."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    source_index: int


@dataclass
class RenderOutput:
    rgb: np.ndarray             # (H, W, 3) float64, >= 0
    alpha_accum: np.ndarray     # (H, W) in [0, 1]
    expected_depth: np.ndarray  # (H, W), 0 where uncovered


@dataclass
class RenderGrads:
    """Cotangents of the photon path, one entry per cloud attribute."""

    positions: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    sh: np.ndarray
    colors: np.ndarray      # per-splat shaded RGB inputs
    pose: np.ndarray        # (6,) local left-increment twist (omega, v)
    background: np.ndarray  # (3,)


def build_cov3d(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T for (..., 3) scales and (..., 4) quaternions.

    Quaternions are normalized internally, so gradients through rotation
    stay well-defined for near-unit inputs.
    """
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    q = rotation / np.linalg.norm(rotation, axis=-1, keepdims=True)
    r = quat_to_rot(q)
    rs = r * scale[..., None, :]
    return rs @ np.swapaxes(rs, -1, -2)


def build_cov3d_vjp(
    scale: np.ndarray, rotation: np.ndarray, grad_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backward of build_cov3d; grad_cov must be symmetric (..., 3, 3)."""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    g = np.asarray(grad_cov, dtype=np.float64)
    q = rotation / np.linalg.norm(rotation, axis=-1, keepdims=True)
    r = quat_to_rot(q)
    # d s_k = 2 s_k (R^T G R)_kk ; d R = 2 G R diag(s^2)
    gr = g @ r
    d_scale = 2.0 * scale * np.einsum("...ak,...ak->...k", r, gr)
    d_rot_mat = 2.0 * gr * (scale**2)[..., None, :]
    d_quat_unit = quat_to_rot_vjp(q, d_rot_mat)
    d_rot = quat_normalize_vjp(rotation, d_quat_unit)
    return d_scale, d_rot


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values, degree 0..3, for unit directions (..., 3)."""
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b = np.empty(d.shape[:-1] + (16,), dtype=d.dtype)
    b[..., 0] = _C0
    b[..., 1] = -_C1 * y
    b[..., 2] = -_C1 * z
    b[..., 3] = -_C1 * x
    b[..., 4] = _C2[0] * xy
    b[..., 5] = _C2[1] * yz
    b[..., 6] = _C2[2] * (2.0 * zz - xx - yy)
    b[..., 7] = _C2[3] * xz
    b[..., 8] = _C2[4] * (xx - yy)
    b[..., 9] = _C3[0] * y * (3.0 * xx - yy)
    b[..., 10] = _C3[1] * xy * z
    b[..., 11] = _C3[2] * y * (4.0 * zz - xx - yy)
    b[..., 12] = _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[..., 13] = _C3[4] * x * (4.0 * zz - xx - yy)
    b[..., 14] = _C3[5] * z * (xx - yy)
    b[..., 15] = _C3[6] * x * (xx - yy)
    return b


def sh_basis_grad(dirs: np.ndarray) -> np.ndarray:
    """d basis / d direction, shape (..., 16, 3)."""
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    g = np.zeros(d.shape[:-1] + (16, 3), dtype=d.dtype)
    g[..., 1, 1] = -_C1
    g[..., 2, 2] = -_C1
    g[..., 3, 0] = -_C1
    g[..., 4, 0] = _C2[0] * y
    g[..., 4, 1] = _C2[0] * x
    g[..., 5, 1] = _C2[1] * z
    g[..., 5, 2] = _C2[1] * y
    g[..., 6, 0] = _C2[2] * (-2.0 * x)
    g[..., 6, 1] = _C2[2] * (-2.0 * y)
    g[..., 6, 2] = _C2[2] * (4.0 * z)
    g[..., 7, 0] = _C2[3] * z
    g[..., 7, 2] = _C2[3] * x
    g[..., 8, 0] = _C2[4] * (2.0 * x)
    g[..., 8, 1] = _C2[4] * (-2.0 * y)
    g[..., 9, 0] = _C3[0] * 6.0 * x * y
    g[..., 9, 1] = _C3[0] * (3.0 * xx - 3.0 * yy)
    g[..., 10, 0] = _C3[1] * y * z
    g[..., 10, 1] = _C3[1] * x * z
    g[..., 10, 2] = _C3[1] * x * y
    g[..., 11, 0] = _C3[2] * (-2.0 * x * y)
    g[..., 11, 1] = _C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[..., 11, 2] = _C3[2] * (8.0 * y * z)
    g[..., 12, 0] = _C3[3] * (-6.0 * x * z)
    g[..., 12, 1] = _C3[3] * (-6.0 * y * z)
    g[..., 12, 2] = _C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[..., 13, 0] = _C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[..., 13, 1] = _C3[4] * (-2.0 * x * y)
    g[..., 13, 2] = _C3[4] * (8.0 * x * z)
    g[..., 14, 0] = _C3[5] * (2.0 * x * z)
    g[..., 14, 1] = _C3[5] * (-2.0 * y * z)
    g[..., 14, 2] = _C3[5] * (xx - yy)
    g[..., 15, 0] = _C3[6] * (3.0 * xx - yy)
    g[..., 15, 1] = _C3[6] * (-2.0 * x * y)
    return g


def sh_eval(coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Shade: clamp_min(0.5 + sum_l c_l Y_l(dir), 0) per channel."""
    coeffs = np.asarray(coeffs)
    basis = sh_basis(view_dir)
    raw = 0.5 + np.einsum("...l,...lc->...c", basis, coeffs)
    return np.maximum(raw, 0.0)


def perspective_jacobian(t: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """d(pixel)/d(camera point) for camera points (..., 3) in front of the camera."""
    t = np.asarray(t)
    tz = t[..., 2]
    j = np.zeros(t.shape[:-1] + (2, 3), dtype=t.dtype)
    j[..., 0, 0] = fx / tz
    j[..., 0, 2] = -fx * t[..., 0] / tz**2
    j[..., 1, 1] = fy / tz
    j[..., 1, 2] = -fy * t[..., 1] / tz**2
    return j


def project_gaussian(cam: CameraModel, position: np.ndarray, cov3d: np.ndarray,
                     source_index: int = 0) -> Splat2D | None:
    """EWA projection of one Gaussian; returns None when culled by the near plane."""
    pos = np.asarray(position, dtype=np.float64).reshape(3)
    t = cam.rot_matrix @ pos + cam.translation
    if t[2] <= cam.near:
        return None
    mean2d = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
    j = perspective_jacobian(t, cam.fx, cam.fy)
    m = j @ cam.rot_matrix
    cov2d = m @ np.asarray(cov3d, dtype=np.float64) @ m.T + BLUR_FLOOR * np.eye(2)
    return Splat2D(mean2d=mean2d, cov2d=cov2d, depth=float(t[2]), source_index=source_index)


def _quat_to_rot_components(q: np.ndarray):
    """Rotation matrix entries of normalized quaternions as nine 1D arrays."""
    norm = np.sqrt((q * q).sum(axis=1))
    w, x, y, z = (q[:, k] / norm for k in range(4))
    return {
        "r00": 1 - 2 * (y * y + z * z), "r01": 2 * (x * y - w * z), "r02": 2 * (x * z + w * y),
        "r10": 2 * (x * y + w * z), "r11": 1 - 2 * (x * x + z * z), "r12": 2 * (y * z - w * x),
        "r20": 2 * (x * z - w * y), "r21": 2 * (y * z + w * x), "r22": 1 - 2 * (x * x + y * y),
    }


def _cov3d_components(scales: np.ndarray, rotations: np.ndarray) -> dict:
    """Unique entries of Sigma = R diag(s)^2 R^T as 1D float64 arrays."""
    rc = _quat_to_rot_components(np.asarray(rotations, dtype=np.float64))
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    out = {}
    for (a, b) in (("0", "0"), ("0", "1"), ("0", "2"), ("1", "1"), ("1", "2"), ("2", "2")):
        val = 0.0
        for k in range(3):
            val = val + rc[f"r{a}{k}"] * rc[f"r{b}{k}"] * s2[:, k]
        out[f"s{a}{b}"] = val
    return out


def _project_cloud(cloud: GaussianCloud, cam: CameraModel) -> dict:
    """Vectorized projection + shading of every splat (float64 components)."""
    rot = cam.rot_matrix
    xs = np.asarray(cloud.positions, dtype=np.float64)
    opac = np.asarray(cloud.opacities, dtype=np.float64)
    t = xs @ rot.T + cam.translation
    depth = t[:, 2]
    valid = depth > cam.near

    tz = np.where(valid, depth, 1.0)
    mx = cam.fx * t[:, 0] / tz + cam.cx
    my = cam.fy * t[:, 1] / tz + cam.cy

    # perspective Jacobian entries (only four are nonzero)
    j00 = cam.fx / tz
    j02 = -cam.fx * t[:, 0] / (tz * tz)
    j11 = cam.fy / tz
    j12 = -cam.fy * t[:, 1] / (tz * tz)

    sig = _cov3d_components(cloud.scales, cloud.rotations)
    # M = J W, rows m0* = j00 W0* + j02 W2*, m1* = j11 W1* + j12 W2*
    m = {}
    for k in range(3):
        m[f"m0{k}"] = j00 * rot[0, k] + j02 * rot[2, k]
        m[f"m1{k}"] = j11 * rot[1, k] + j12 * rot[2, k]

    def quad(mc, md):
        return (mc[0] * md[0] * sig["s00"] + mc[1] * md[1] * sig["s11"]
                + mc[2] * md[2] * sig["s22"]
                + (mc[0] * md[1] + mc[1] * md[0]) * sig["s01"]
                + (mc[0] * md[2] + mc[2] * md[0]) * sig["s02"]
                + (mc[1] * md[2] + mc[2] * md[1]) * sig["s12"])

    row0 = (m["m00"], m["m01"], m["m02"])
    row1 = (m["m10"], m["m11"], m["m12"])
    c00 = quad(row0, row0) + BLUR_FLOOR
    c01 = quad(row0, row1)
    c11 = quad(row1, row1) + BLUR_FLOOR

    det = c00 * c11 - c01 * c01
    a00 = c11 / det
    a01 = -c01 / det
    a11 = c00 / det

    mid = 0.5 * (c00 + c11)
    dif = 0.5 * (c00 - c11)
    lam_max = mid + np.sqrt(dif * dif + c01 * c01)
    # Mahalanobis-squared cutoff: 3 sigma or the alpha-skip radius
    qmax = np.minimum(FOOTPRINT_SIGMA**2,
                      2.0 * np.log(np.maximum(255.0 * opac, 1.0)))
    radius = np.sqrt(qmax * lam_max)

    n = len(cloud)
    u = xs - cam.center
    u_norm = np.maximum(np.sqrt((u * u).sum(axis=1)), 1e-12)
    dirs = u / u_norm[:, None]
    craw = np.empty((n, 3))
    _kernels.shade_forward(np.ascontiguousarray(cloud.sh), dirs, craw)
    colors = np.maximum(craw, 0.0)

    alive = valid & (radius > 0.0)
    order = np.lexsort((np.arange(n), np.where(alive, depth, np.inf)))
    order = order[alive[order]]

    return {
        "t": t, "depth": depth, "valid": valid, "mx": mx, "my": my,
        "j00": j00, "j02": j02, "j11": j11, "j12": j12,
        "sig": sig, "m": m, "a00": a00, "a01": a01, "a11": a11,
        "qmax": qmax, "radius": radius, "rot": rot, "center": cam.center,
        "u_norm": u_norm, "dirs": dirs, "craw": craw,
        "colors": colors, "opac": opac, "order": order,
    }


def _sorted_splats(proj: dict, width: int, height: int) -> dict:
    """Kernel-ready per-splat arrays in composite order."""
    order = proj["order"]
    mx = proj["mx"][order]
    my = proj["my"][order]
    x0, x1, y0, y1 = _kernels.footprint_rect(mx, my, proj["radius"][order], width, height)
    return {
        "order": order, "mx": mx, "my": my,
        "a00": proj["a00"][order], "a01": proj["a01"][order], "a11": proj["a11"][order],
        "opac": proj["opac"][order], "qmax": proj["qmax"][order],
        "x0": x0, "x1": x1, "y0": y0, "y1": y1,
        "colors": np.ascontiguousarray(proj["colors"][order]),
        "depth": proj["depth"][order],
    }


def rasterize(cloud: GaussianCloud, cam: CameraModel,
              background: np.ndarray = (0.0, 0.0, 0.0), threads: int = 1,
              cache: dict | None = None, check: bool = True) -> RenderOutput:
    """Render the cloud; pass a dict as `cache` to reuse work in render_gradients."""
    if check:
        # quaternions are normalized inside the projection, so near-unit is fine
        cloud.validate(quat_tol=1e-3)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if np.any(bg < 0):
        raise DataError("background color must be non-negative")
    h, w = cam.height, cam.width
    proj = _project_cloud(cloud, cam)
    splats = _sorted_splats(proj, w, h)

    rgb = np.zeros((h, w, 3))
    tend = np.ones((h, w))
    depth_acc = np.zeros((h, w))
    if splats["order"].shape[0]:
        _kernels.composite_forward(
            splats["mx"], splats["my"], splats["a00"], splats["a01"], splats["a11"],
            splats["opac"], splats["qmax"], splats["x0"], splats["x1"],
            splats["y0"], splats["y1"], splats["colors"], splats["depth"],
            rgb, tend, depth_acc,
        )
    alpha = 1.0 - tend
    rgb += tend[:, :, None] * bg
    depth_img = depth_acc / np.maximum(alpha, DEPTH_EPS)
    if cache is not None:
        cache["proj"] = proj
        cache["splats"] = splats
        cache["tend"] = tend
    return RenderOutput(rgb=rgb, alpha_accum=alpha, expected_depth=depth_img)


def render_gradients(cloud: GaussianCloud, cam: CameraModel, adjoint_rgb: np.ndarray,
                     background: np.ndarray = (0.0, 0.0, 0.0), threads: int = 1,
                     cache: dict | None = None) -> RenderGrads:
    """Exact VJP of rasterize's rgb output against `adjoint_rgb`.

    Returns cotangents for every cloud attribute, the per-splat shaded colors,
    the camera pose as a local left-increment twist at the current pose, and
    the background color.
    """
    adjoint = np.ascontiguousarray(adjoint_rgb, dtype=np.float64)
    if adjoint.shape != (cam.height, cam.width, 3):
        raise ShapeError(
            f"adjoint must be {(cam.height, cam.width, 3)}, got {adjoint.shape}")
    if not np.all(np.isfinite(adjoint)):
        raise DataError("adjoint image has non-finite entries")
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    if cache is not None and "proj" in cache:
        proj, splats, tend = cache["proj"], cache["splats"], cache["tend"]
    else:
        cloud.validate(quat_tol=1e-3)
        h, w = cam.height, cam.width
        proj = _project_cloud(cloud, cam)
        splats = _sorted_splats(proj, w, h)
        tend = np.ones((h, w))
        if splats["order"].shape[0]:
            scratch_rgb = np.zeros((h, w, 3))
            scratch_depth = np.zeros((h, w))
            _kernels.composite_forward(
                splats["mx"], splats["my"], splats["a00"], splats["a01"], splats["a11"],
                splats["opac"], splats["qmax"], splats["x0"], splats["x1"],
                splats["y0"], splats["y1"], splats["colors"], splats["depth"],
                scratch_rgb, tend, scratch_depth,
            )

    n = len(cloud)
    order = splats["order"]
    k = order.shape[0]
    acc = {
        "colors": np.zeros((n, 3)), "opacities": np.zeros(n),
        "mx": np.zeros(n), "my": np.zeros(n),
        "da00": np.zeros(n), "da01": np.zeros(n), "da11": np.zeros(n),
        "bg": np.zeros(3),
    }
    if k:
        d_opac = np.zeros(k)
        d_mx = np.zeros(k)
        d_my = np.zeros(k)
        d_a00 = np.zeros(k)
        d_a01 = np.zeros(k)
        d_a11 = np.zeros(k)
        d_col = np.zeros((k, 3))
        tcur = tend.copy()
        suffix = np.zeros(tend.shape + (3,))
        _kernels.composite_backward(
            splats["mx"], splats["my"], splats["a00"], splats["a01"], splats["a11"],
            splats["opac"], splats["qmax"], splats["x0"], splats["x1"],
            splats["y0"], splats["y1"], splats["colors"], adjoint, bg, tend, tcur, suffix,
            d_opac, d_mx, d_my, d_a00, d_a01, d_a11, d_col,
        )
        acc["colors"][order] = d_col
        acc["opacities"][order] = d_opac
        acc["mx"][order] = d_mx
        acc["my"][order] = d_my
        acc["da00"][order] = d_a00
        acc["da01"][order] = d_a01
        acc["da11"][order] = d_a11

    # rgb includes T_end * background at every pixel (T_end = 1 where uncovered)
    acc["bg"] = np.einsum("hwc,hw->c", adjoint, tend)
    return _chain_to_attributes(proj, cloud, cam, acc)


def _chain_to_attributes(proj: dict, cloud: GaussianCloud, cam: CameraModel,
                         acc: dict) -> RenderGrads:
    """Per-splat 2D cotangents -> 3D attribute, pose, and background gradients.

    All algebra runs on float64 component arrays over the valid splats.
    """
    n = len(cloud)
    idx = np.flatnonzero(proj["valid"])
    d_pos = np.zeros((n, 3))
    d_scale = np.zeros((n, 3))
    d_rot = np.zeros((n, 4))
    d_sh = np.zeros((n, 16, 3))
    d_w = np.zeros((3, 3))
    d_tau = np.zeros(3)
    pose = np.zeros(6)

    if idx.size:
        a00, a01, a11 = proj["a00"][idx], proj["a01"][idx], proj["a11"][idx]
        da00, da01, da11 = acc["da00"][idx], acc["da01"][idx], acc["da11"][idx]

        # A = C^-1 => dC = -A dA A  (dA has equal off-diagonals by construction)
        p00 = a00 * da00 + a01 * da01
        p01 = a00 * da01 + a01 * da11
        p10 = a01 * da00 + a11 * da01
        p11 = a01 * da01 + a11 * da11
        g00 = -(p00 * a00 + p01 * a01)
        g01 = -(p00 * a01 + p01 * a11)
        g10 = -(p10 * a00 + p11 * a01)
        g11 = -(p10 * a01 + p11 * a11)
        g01 = 0.5 * (g01 + g10)   # symmetric cotangent of the 2D covariance
        m0 = [proj["m"][f"m0{k}"][idx] for k in range(3)]
        m1 = [proj["m"][f"m1{k}"][idx] for k in range(3)]

        # d Sigma = M^T G M (3x3 symmetric, 6 unique entries)
        dsig = {}
        for a in range(3):
            ga_row = g00 * m0[a] + g01 * m1[a]
            gb_row = g01 * m0[a] + g11 * m1[a]
            for b in range(a, 3):
                dsig[(a, b)] = ga_row * m0[b] + gb_row * m1[b]

        # d M = 2 G M Sigma
        sig = {key: v[idx] for key, v in proj["sig"].items()}
        smat = [[sig["s00"], sig["s01"], sig["s02"]],
                [sig["s01"], sig["s11"], sig["s12"]],
                [sig["s02"], sig["s12"], sig["s22"]]]
        gm0 = [g00 * m0[k] + g01 * m1[k] for k in range(3)]
        gm1 = [g01 * m0[k] + g11 * m1[k] for k in range(3)]
        dm0 = [2.0 * sum(gm0[l] * smat[l][k] for l in range(3)) for k in range(3)]
        dm1 = [2.0 * sum(gm1[l] * smat[l][k] for l in range(3)) for k in range(3)]

        rot = proj["rot"]
        # d J entries: dj_ca = sum_k dm_ck W_ak
        dj00 = sum(dm0[k] * rot[0, k] for k in range(3))
        dj02 = sum(dm0[k] * rot[2, k] for k in range(3))
        dj11 = sum(dm1[k] * rot[1, k] for k in range(3))
        dj12 = sum(dm1[k] * rot[2, k] for k in range(3))

        # pixel-mean path: dt += J^T d mean
        dmx, dmy = acc["mx"][idx], acc["my"][idx]
        j00, j02 = proj["j00"][idx], proj["j02"][idx]
        j11, j12 = proj["j11"][idx], proj["j12"][idx]
        dt0 = j00 * dmx
        dt1 = j11 * dmy
        dt2 = j02 * dmx + j12 * dmy

        # Jacobian entries depend on the camera-space point
        t = proj["t"][idx]
        tz = t[:, 2]
        fx, fy = cam.fx, cam.fy
        dt0 += dj02 * (-fx / tz**2)
        dt1 += dj12 * (-fy / tz**2)
        dt2 += (dj00 * (-fx / tz**2) + dj11 * (-fy / tz**2)
                + dj02 * (2.0 * fx * t[:, 0] / tz**3)
                + dj12 * (2.0 * fy * t[:, 1] / tz**3))

        # shading path: per-splat colors -> SH coefficients and view direction
        eff = np.where(proj["craw"] > 0.0, acc["colors"], 0.0)
        d_dir_full = np.empty((n, 3))
        _kernels.shade_backward(np.ascontiguousarray(cloud.sh), proj["dirs"],
                                eff, d_sh, d_dir_full)
        d_dir = d_dir_full[idx]

        dirs = proj["dirs"][idx]
        u_norm = proj["u_norm"][idx]
        d_u = (d_dir - (d_dir * dirs).sum(axis=1, keepdims=True) * dirs) / u_norm[:, None]

        dt = np.stack([dt0, dt1, dt2], axis=1)
        d_pos[idx] = dt @ rot + d_u
        d_tau += dt.sum(axis=0)
        xs = np.asarray(cloud.positions, np.float64)[idx]
        d_w += dt.T @ xs

        # dW from the M = J W path
        for k in range(3):
            d_w[0, k] += np.dot(j00, dm0[k])
            d_w[1, k] += np.dot(j11, dm1[k])
            d_w[2, k] += np.dot(j02, dm0[k]) + np.dot(j12, dm1[k])

        # camera-center path: c = -W^T tau
        d_center = -d_u.sum(axis=0)
        d_tau += -(rot @ d_center)
        d_w += -np.outer(cam.translation, d_center)

        dsig_mat = np.empty((idx.size, 3, 3))
        for a in range(3):
            for b in range(a, 3):
                dsig_mat[:, a, b] = dsig[(a, b)]
                dsig_mat[:, b, a] = dsig[(a, b)]
        ds, dq = build_cov3d_vjp(cloud.scales[idx], cloud.rotations[idx], dsig_mat)
        d_scale[idx] = ds
        d_rot[idx] = dq

        # local pose increment: W' = exp(w^) W, tau' = exp(w^) tau + v, so
        # omega_k = <e_k^, dW W^T> + dtau . (e_k^ tau) and v-part = dtau
        tau = cam.translation
        wr = d_w @ rot.T
        pose[0] = wr[2, 1] - wr[1, 2] + (d_tau[2] * tau[1] - d_tau[1] * tau[2])
        pose[1] = wr[0, 2] - wr[2, 0] + (d_tau[0] * tau[2] - d_tau[2] * tau[0])
        pose[2] = wr[1, 0] - wr[0, 1] + (d_tau[1] * tau[0] - d_tau[0] * tau[1])
        pose[3:] = d_tau

    return RenderGrads(
        positions=d_pos, opacities=acc["opacities"], scales=d_scale, rotations=d_rot,
        sh=d_sh, colors=acc["colors"], pose=pose, background=acc["bg"],
    )


def render_depth_normal(output: RenderOutput, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Expected-depth image plus normals from central differences of the
    back-projected depth. Visualization only; no gradient contract."""
    depth = output.expected_depth.astype(np.float64)
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = (xs + 0.5 - cam.cx) / cam.fx
    py = (ys + 0.5 - cam.cy) / cam.fy
    pts = np.stack([px * depth, py * depth, depth], axis=-1)

    def shift(arr, dy, dx):
        y = np.clip(ys + dy, 0, h - 1)
        x = np.clip(xs + dx, 0, w - 1)
        return arr[y, x]

    ddx = shift(pts, 0, 1) - shift(pts, 0, -1)
    ddy = shift(pts, 1, 0) - shift(pts, -1, 0)
    normal = np.cross(ddx, ddy)
    norm = np.linalg.norm(normal, axis=-1)
    covered = output.alpha_accum > 0
    ok = (norm > 1e-12) & covered
    normal[ok] /= norm[ok][:, None]
    # orient toward the camera
    flip = ok & (np.sum(normal * pts, axis=-1) > 0)
    normal[flip] *= -1.0
    normal[~ok] = np.array([0.0, 0.0, 1.0])
    return depth, normal
