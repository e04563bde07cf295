"""Fully known desk-scale scenes for end-to-end verification without any
pretrained model: random ground-truth Gaussians in a unit box, orbit cameras,
rendered ground-truth images and depths, and a pixel-aligned init cloud built
by unprojecting the rendered expected depth (optionally noised).

Regeneration with the same seed is byte-identical on disk.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from splatprobe.defaults import (
    ORBIT_ELEVATION_DEG,
    ORBIT_FOV_DEG,
    ORBIT_RADIUS,
    SYNTH_GAUSSIANS,
    SYNTH_TEST_VIEWS,
    SYNTH_TRAIN_VIEWS,
    Y00,
)
from splatprobe.errors import DataError
from splatprobe.geometry import CameraModel, look_at_camera, quat_normalize, se3_exp_apply
from splatprobe.renderer import GaussianCloud, rasterize
from splatprobe.sceneio import (
    SceneBundle,
    camera_to_json,
    ftz_write,
    image_write,
    load_scene,
    ply_write,
    save_scene_config,
)


def gen_orbit_cameras(n: int, radius: float, target: np.ndarray, fov_deg: float,
                      width: int, height: int,
                      elevation_deg: float = ORBIT_ELEVATION_DEG) -> list[CameraModel]:
    """Equally spaced azimuths on a circle, all looking at `target`."""
    if n < 1:
        raise DataError("need at least one camera")
    target = np.asarray(target, dtype=np.float64)
    focal = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    elev = math.radians(elevation_deg)
    cams = []
    for i in range(n):
        azim = 2.0 * math.pi * i / n
        eye = target + radius * np.array([
            math.cos(elev) * math.cos(azim),
            math.cos(elev) * math.sin(azim),
            math.sin(elev),
        ])
        cams.append(look_at_camera(eye, target, focal, focal, width, height))
    return cams


def perturb_poses(cameras: list[CameraModel], rot_deg: float, trans_frac: float,
                  extent: float, seed: int) -> list[CameraModel]:
    """Apply a rotation of exactly rot_deg about a random axis and a random
    translation of exactly trans_frac * extent to each camera pose."""
    rng = np.random.default_rng(seed)
    out = []
    for cam in cameras:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        tdir = rng.normal(size=3)
        tdir /= np.linalg.norm(tdir)
        twist = np.concatenate([axis * math.radians(rot_deg), tdir * trans_frac * extent])
        out.append(se3_exp_apply(twist, cam))
    return out


def _random_cloud(rng: np.random.Generator, n: int) -> GaussianCloud:
    """Blobby, well-covered content: large overlapping splats so training views
    see few empty pixels (keeps init-cloud depth targets smooth)."""
    positions = rng.uniform(-0.5, 0.5, size=(n, 3))
    scales = rng.uniform(0.06, 0.16, size=(n, 3))
    rotations = quat_normalize(rng.normal(size=(n, 4)))
    opacities = rng.uniform(0.65, 0.97, size=n)
    rgb = rng.uniform(0.05, 0.95, size=(n, 3))
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = (rgb - 0.5) / Y00
    sh[:, 1:, :] = rng.normal(scale=0.02, size=(n, 15, 3))
    return GaussianCloud(positions=positions, opacities=opacities, scales=scales,
                         rotations=rotations, sh=sh)


def _unproject_depth(cam: CameraModel, depth: np.ndarray) -> np.ndarray:
    """Pixel-aligned world points from a per-pixel depth image (row-major)."""
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = (xs + 0.5 - cam.cx) / cam.fx
    py = (ys + 0.5 - cam.cy) / cam.fy
    pts_cam = np.stack([px * depth, py * depth, depth], axis=-1).reshape(-1, 3)
    return (pts_cam - cam.translation) @ cam.rot_matrix


def gen_scene(out_dir: str | Path, seed: int = 0, n_gaussians: int = SYNTH_GAUSSIANS,
              n_train: int = SYNTH_TRAIN_VIEWS, n_test: int = SYNTH_TEST_VIEWS,
              image_size: int = 64, init_noise: float = 0.0, outlier_frac: float = 0.0,
              radius: float = ORBIT_RADIUS, fov_deg: float = ORBIT_FOV_DEG,
              background: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> SceneBundle:
    """Generate a complete scene bundle on disk and return it loaded.

    Test views are interleaved between training views on the orbit. The init
    cloud has one point per training pixel (view-major, row-major), built from
    the rendered expected depth, then perturbed by Gaussian noise of standard
    deviation `init_noise` (scene units) with `outlier_frac` of points
    resampled uniformly inside the box.
    """
    if min(n_gaussians, n_train, image_size) < 1 or n_test < 0:
        raise DataError("counts must be positive (n_test may be zero)")
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)

    cloud = _random_cloud(rng, n_gaussians)
    total = n_train + n_test
    cams = gen_orbit_cameras(total, radius, np.zeros(3), fov_deg, image_size, image_size)
    if n_test:
        stride = total / n_test
        test_views = sorted({int((i + 0.5) * stride) % total for i in range(n_test)})
        while len(test_views) < n_test:  # collision fallback for tiny view counts
            extra = next(v for v in range(total) if v not in test_views)
            test_views = sorted(test_views + [extra])
    else:
        test_views = []
    train_views = [v for v in range(total) if v not in test_views]

    bg = np.asarray(background, dtype=np.float64)
    images8 = []
    depths = {}
    for idx, cam in enumerate(cams):
        ro = rasterize(cloud, cam, bg)
        img8 = np.round(np.clip(ro.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
        images8.append(img8)
        if idx in train_views:
            depths[idx] = (ro.expected_depth, ro.alpha_accum)

    points = []
    colors = []
    for v in train_views:
        depth, alpha = depths[v]
        covered = alpha > 1e-3
        # anchor residual uncovered pixels at the view's mean covered depth
        fallback = float(depth[covered].mean()) if covered.any() else radius
        filled = np.where(covered, depth, fallback)
        points.append(_unproject_depth(cams[v], filled))
        colors.append(images8[v].reshape(-1, 3).astype(np.float64) / 255.0)
    points = np.concatenate(points, axis=0)
    colors = np.concatenate(colors, axis=0)

    if init_noise > 0.0:
        points = points + rng.normal(scale=init_noise, size=points.shape)
    if outlier_frac > 0.0:
        n_out = int(round(outlier_frac * points.shape[0]))
        if n_out:
            pick = rng.choice(points.shape[0], size=n_out, replace=False)
            points[pick] = rng.uniform(-0.75, 0.75, size=(n_out, 3))

    for idx, img8 in enumerate(images8):
        image_write(out / "images" / f"view_{idx:03d}.png", img8)
    for v in train_views:
        ftz_write(out / "gt" / f"depth_{v:03d}.ftz", depths[v][0])
    ply_write(out / "init_cloud.ply", points, colors)
    gt_rgb = np.clip(0.5 + cloud.sh[:, 0, :] * Y00, 0.0, 1.0)
    ply_write(out / "gt" / "cloud.ply", cloud.positions, gt_rgb)

    config = {
        "version": 1,
        "name": out.name,
        "images": [f"images/view_{i:03d}.png" for i in range(total)],
        "cameras": [camera_to_json(c) for c in cams],
        "train_views": train_views,
        "test_views": test_views,
        "init_cloud": "init_cloud.ply",
        "features": {},
        "gt_cloud": "gt/cloud.ply",
        "gt_depth": {str(v): f"gt/depth_{v:03d}.ftz" for v in train_views},
    }
    save_scene_config(out, config)
    return load_scene(out)
