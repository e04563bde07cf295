"""Image and 3D metrics: masked PSNR/SSIM (SSIM with an analytic input
gradient, reused by the photometric loss), frustum validity masks, DTU-style
point-cloud metrics, Pearson correlation matrices, and dense rank tables.

SSIM uses an 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03, range 1).
Local statistics are computed with zero-padded windows renormalized by the
in-image weight mass, so every pixel has a well-defined value; masked pixels
are excluded only from the final mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from splatprobe.defaults import (
    MASK_ALPHA_MIN,
    MASK_DEPTH_TOL,
    PSNR_CAP_DB,
    SSIM_K1,
    SSIM_K2,
    SSIM_SIGMA,
    SSIM_WINDOW,
)
from splatprobe.errors import DataError, ShapeError
from splatprobe.geometry import CameraModel
from splatprobe.renderer import RenderOutput


def _check_pair(img: np.ndarray, ref: np.ndarray, mask: np.ndarray | None):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ShapeError(f"image shapes differ: {img.shape} vs {ref.shape}")
    if img.ndim == 2:
        img = img[:, :, None]
        ref = ref[:, :, None]
    if img.ndim != 3:
        raise ShapeError(f"expected (H, W[, C]) images, got {img.shape}")
    if mask is None:
        mask = np.ones(img.shape[:2], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != img.shape[:2]:
            raise ShapeError(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    if not mask.any():
        raise DataError("metric mask selects no pixels")
    return img, ref, mask


def psnr(img: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1/MSE) over masked pixels, capped at 99 dB for identical inputs."""
    img, ref, mask = _check_pair(img, ref, mask)
    diff = (img - ref)[mask]
    mse = float(np.mean(diff**2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / mse)))


def _gauss_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


def _window_sum(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable zero-padded correlation over the two leading (spatial) axes."""
    out = correlate1d(arr, kernel, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)


def _ssim_internals(img: np.ndarray, ref: np.ndarray):
    kernel = _gauss_kernel()
    z = _window_sum(np.ones(img.shape[:2], dtype=np.float64), kernel)[:, :, None]
    mu_x = _window_sum(img, kernel) / z
    mu_y = _window_sum(ref, kernel) / z
    e_xx = _window_sum(img * img, kernel) / z
    e_yy = _window_sum(ref * ref, kernel) / z
    e_xy = _window_sum(img * ref, kernel) / z
    var_x = e_xx - mu_x**2
    var_y = e_yy - mu_y**2
    cov = e_xy - mu_x * mu_y
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * cov + c2
    b1 = mu_x**2 + mu_y**2 + c1
    b2 = var_x + var_y + c2
    smap = (a1 * a2) / (b1 * b2)
    return {"kernel": kernel, "z": z, "mu_x": mu_x, "mu_y": mu_y,
            "a1": a1, "a2": a2, "b1": b1, "b2": b2, "smap": smap}


def ssim(img: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean local SSIM over masked pixels (channels averaged)."""
    img, ref, mask = _check_pair(img, ref, mask)
    smap = _ssim_internals(img, ref)["smap"]
    return float(smap[mask].mean())


def ssim_and_grad(img: np.ndarray, ref: np.ndarray,
                  mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """SSIM plus its analytic gradient with respect to `img`."""
    img, ref, mask = _check_pair(img, ref, mask)
    st = _ssim_internals(img, ref)
    a1, a2, b1, b2, smap = st["a1"], st["a2"], st["b1"], st["b2"], st["smap"]
    mu_x, mu_y, z, kernel = st["mu_x"], st["mu_y"], st["z"], st["kernel"]

    n_terms = int(mask.sum()) * img.shape[2]
    g_s = np.zeros_like(smap)
    g_s[mask] = 1.0 / n_terms

    inv_b = 1.0 / (b1 * b2)
    d_mu_x = g_s * (2.0 * mu_y * a2 * inv_b        # A1 path
                    - 2.0 * mu_y * a1 * inv_b      # cov path
                    - 2.0 * mu_x * smap / b1       # B1 path
                    + 2.0 * mu_x * smap / b2)      # var path
    d_exx = g_s * (-smap / b2)
    d_exy = g_s * (2.0 * a1 * inv_b)

    grad = _window_sum(d_mu_x / z, kernel)
    grad += _window_sum(d_exx / z, kernel) * (2.0 * img)
    grad += _window_sum(d_exy / z, kernel) * ref
    return float(smap[mask].mean()), grad


def build_valid_mask(output: RenderOutput, test_cam: CameraModel,
                     train_cams: list[CameraModel],
                     train_depths: dict[int, np.ndarray] | None = None,
                     alpha_min: float = MASK_ALPHA_MIN,
                     depth_tol: float = MASK_DEPTH_TOL) -> np.ndarray:
    """Pixel validity for metric evaluation on a held-out view.

    Valid pixels have accumulated alpha >= alpha_min and an expected depth
    whose back-projection lands inside the frustum of at least one training
    view; when a reference depth is supplied for that view the reprojected
    depth must also agree within depth_tol (relative).
    """
    h, w = output.alpha_accum.shape
    covered = output.alpha_accum >= alpha_min
    depth = output.expected_depth.astype(np.float64)

    ys, xs = np.mgrid[0:h, 0:w]
    px = (xs + 0.5 - test_cam.cx) / test_cam.fx
    py = (ys + 0.5 - test_cam.cy) / test_cam.fy
    pts_cam = np.stack([px * depth, py * depth, depth], axis=-1).reshape(-1, 3)
    rot = test_cam.rot_matrix
    pts_world = (pts_cam - test_cam.translation) @ rot

    seen = np.zeros(h * w, dtype=bool)
    for idx, cam in enumerate(train_cams):
        t = pts_world @ cam.rot_matrix.T + cam.translation
        tz = t[:, 2]
        front = tz > cam.near
        u = np.where(front, cam.fx * t[:, 0] / np.where(front, tz, 1.0) + cam.cx, -1.0)
        v = np.where(front, cam.fy * t[:, 1] / np.where(front, tz, 1.0) + cam.cy, -1.0)
        inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        if train_depths is not None and idx in train_depths:
            ref = np.asarray(train_depths[idx], dtype=np.float64)
            ui = np.clip(u.astype(np.int64), 0, cam.width - 1)
            vi = np.clip(v.astype(np.int64), 0, cam.height - 1)
            ref_z = ref[vi, ui]
            agree = (ref_z > 0) & (np.abs(tz - ref_z) <= depth_tol * np.abs(ref_z))
            inside &= agree
        seen |= inside
    return covered & seen.reshape(h, w)


@dataclass
class CloudMetrics:
    accuracy: float       # mean nearest-GT distance over reconstruction
    completeness: float   # mean nearest-reconstruction distance over GT
    distance: float       # mean distance over the provided matching


def cloud_metrics(recon: np.ndarray, gt: np.ndarray,
                  matching: np.ndarray | None = None) -> CloudMetrics:
    """DTU-style point metrics between a reconstruction and ground truth."""
    recon = np.asarray(recon, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if recon.ndim != 2 or recon.shape[1] != 3 or gt.ndim != 2 or gt.shape[1] != 3:
        raise ShapeError("point sets must be (N, 3)")
    if recon.shape[0] == 0 or gt.shape[0] == 0:
        raise DataError("point sets must be non-empty")
    acc = float(cKDTree(gt).query(recon)[0].mean())
    comp = float(cKDTree(recon).query(gt)[0].mean())
    if matching is None:
        if recon.shape[0] != gt.shape[0]:
            raise DataError("matching required when point counts differ")
        matching = np.arange(recon.shape[0])
    matching = np.asarray(matching, dtype=np.int64)
    if matching.shape[0] != recon.shape[0]:
        raise ShapeError("matching must give one ground-truth index per recon point")
    if matching.min() < 0 or matching.max() >= gt.shape[0]:
        raise DataError("matching index out of range")
    dist = float(np.linalg.norm(recon - gt[matching], axis=1).mean())
    return CloudMetrics(accuracy=acc, completeness=comp, distance=dist)


@dataclass
class CorrMatrix:
    labels: list[str]
    values: np.ndarray                      # symmetric, diagonal 1
    degenerate: list[str] = field(default_factory=list)  # zero-variance inputs


def pearson_matrix(vectors: dict[str, np.ndarray]) -> CorrMatrix:
    """Pearson coefficients between labeled equal-length vectors.

    Zero-variance vectors yield 0 off-diagonal entries and are flagged.
    """
    labels = list(vectors.keys())
    arrs = [np.asarray(vectors[k], dtype=np.float64).ravel() for k in labels]
    if not arrs:
        raise DataError("no vectors given")
    n = arrs[0].shape[0]
    if n < 2:
        raise DataError("need at least 2 samples per vector")
    for k, a in zip(labels, arrs):
        if a.shape[0] != n:
            raise ShapeError(f"vector {k!r} has length {a.shape[0]}, expected {n}")
    centered = [a - a.mean() for a in arrs]
    sigma = [np.sqrt(np.mean(c**2)) for c in centered]
    degenerate = [k for k, s in zip(labels, sigma) if s < 1e-15]
    m = len(labels)
    out = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            if sigma[i] < 1e-15 or sigma[j] < 1e-15:
                r = 0.0
            else:
                r = float(np.mean(centered[i] * centered[j]) / (sigma[i] * sigma[j]))
                r = min(1.0, max(-1.0, r))
            out[i, j] = out[j, i] = r
    return CorrMatrix(labels=labels, values=out, degenerate=degenerate)


def rank_cells(values: np.ndarray, higher_is_better: list[bool]) -> np.ndarray:
    """Dense ordinal ranks per column (1 = best); ties share a rank."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 2:
        raise ShapeError("rank table must be 2D (feature x metric)")
    if vals.shape[1] != len(higher_is_better):
        raise ShapeError("need one direction flag per metric column")
    ranks = np.zeros(vals.shape, dtype=np.int64)
    for col, better_high in enumerate(higher_is_better):
        column = vals[:, col]
        uniq = np.unique(column)           # ascending
        if better_high:
            uniq = uniq[::-1]
        lookup = {v: i + 1 for i, v in enumerate(uniq)}
        ranks[:, col] = [lookup[v] for v in column]
    return ranks
