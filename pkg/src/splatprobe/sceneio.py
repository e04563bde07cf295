"""Bit-exact interchange: FTZ tensor files, ASCII PLY point clouds, 8-bit
PNG/PPM images, the scene-config JSON document, and report CSV/JSON.

FTZ layout (little-endian): magic "F2GS", version u8 = 1, dtype u8
(0 = f32, 1 = f64), ndim u8, ndim x u64 dims, then the row-major payload.

Scene config schema v1 (all paths relative to the config file):
  version, name, images[], cameras[] (fx fy cx cy width height rotation[wxyz]
  translation near), train_views[], test_views[], init_cloud (PLY),
  features {tag: {view_id: path}}, optional gt_cloud, gt_depth {view_id: path}.
The init cloud is pixel-aligned: one point per training pixel, ordered
view-major then row-major within each view.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from splatprobe.errors import AlignmentError, DataError, FormatError
from splatprobe.features import FeatureMap
from splatprobe.geometry import CameraModel

FTZ_MAGIC = b"F2GS"
FTZ_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def ftz_write_bytes(tensor: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(tensor)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float64)
    code = _DTYPE_CODES[arr.dtype]
    header = FTZ_MAGIC + struct.pack("<BBB", FTZ_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return header + payload


def ftz_read_bytes(data: bytes) -> np.ndarray:
    if len(data) < 7:
        raise FormatError(f"FTZ header truncated: {len(data)} bytes, need at least 7")
    if data[:4] != FTZ_MAGIC:
        raise FormatError(f"bad FTZ magic {data[:4]!r} at offset 0")
    version, code, ndim = struct.unpack_from("<BBB", data, 4)
    if version != FTZ_VERSION:
        raise FormatError(f"unsupported FTZ version {version} at offset 4")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown FTZ dtype code {code} at offset 5")
    dims_end = 7 + 8 * ndim
    if len(data) < dims_end:
        raise FormatError(f"FTZ dims truncated: {len(data)} bytes, need {dims_end}")
    dims = struct.unpack_from(f"<{ndim}Q", data, 7)
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
    actual = len(data) - dims_end
    if actual != expected:
        raise FormatError(
            f"FTZ payload length mismatch: expected {expected} bytes for dims {dims}, got {actual}"
        )
    arr = np.frombuffer(data[dims_end:], dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def ftz_write(path: str | Path, tensor: np.ndarray):
    Path(path).write_bytes(ftz_write_bytes(tensor))


def ftz_read(path: str | Path) -> np.ndarray:
    return ftz_read_bytes(Path(path).read_bytes())


def ply_write(path: str | Path, points: np.ndarray, colors: np.ndarray | None = None):
    """ASCII PLY with x y z and uchar RGB, 9 significant digits."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"points must be (N, 3), got {pts.shape}")
    n = pts.shape[0]
    if colors is None:
        rgb = np.full((n, 3), 255, dtype=np.uint8)
    else:
        c = np.asarray(colors)
        if c.dtype.kind == "f":
            c = np.round(np.clip(c, 0.0, 1.0) * 255.0)
        rgb = c.astype(np.uint8)
        if rgb.shape != (n, 3):
            raise DataError("colors must be (N, 3)")
    out = io.StringIO()
    out.write("ply\nformat ascii 1.0\n")
    out.write(f"element vertex {n}\n")
    out.write("property float x\nproperty float y\nproperty float z\n")
    out.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
    out.write("end_header\n")
    for p, c in zip(pts, rgb):
        out.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
    Path(path).write_text(out.getvalue())


def ply_read(path: str | Path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Returns (points, colors in [0,1], warnings). Missing colors default to
    mid-gray with a warning."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    idx = 1
    fmt = None
    count = None
    props: list[str] = []
    in_vertex = False
    while idx < len(lines):
        line = lines[idx].strip()
        idx += 1
        if line.startswith("comment"):
            continue
        if line.startswith("format"):
            fmt = line.split()[1]
        elif line.startswith("element"):
            parts = line.split()
            if parts[1] == "vertex":
                count = int(parts[2])
                in_vertex = True
            else:
                raise FormatError(f"{path}: unsupported element {parts[1]!r}")
        elif line.startswith("property"):
            if in_vertex:
                props.append(line.split()[-1])
        elif line == "end_header":
            break
    else:
        raise FormatError(f"{path}: missing end_header")
    if fmt != "ascii":
        raise FormatError(f"{path}: only ascii PLY is supported, got {fmt!r}")
    if count is None:
        raise FormatError(f"{path}: no vertex element")
    for needed in ("x", "y", "z"):
        if needed not in props:
            raise FormatError(f"{path}: vertex property {needed!r} missing")
    known = {"x", "y", "z", "red", "green", "blue"}
    if not set(props) <= known:
        raise FormatError(f"{path}: unsupported vertex properties {sorted(set(props) - known)}")

    body = lines[idx:idx + count]
    if len(body) < count:
        raise FormatError(f"{path}: expected {count} vertices, found {len(body)}")
    table = np.array([row.split() for row in body], dtype=np.float64)
    if table.shape[1] != len(props):
        raise FormatError(f"{path}: vertex rows have {table.shape[1]} fields, header lists {len(props)}")
    cols = {name: table[:, i] for i, name in enumerate(props)}
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    warnings = []
    if {"red", "green", "blue"} <= set(props):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / 255.0
    else:
        colors = np.full((count, 3), 0.5)
        warnings.append("missing color properties; defaulted to mid-gray")
    return points, colors, warnings


def image_write(path: str | Path, img: np.ndarray):
    """8-bit PNG (or PPM by extension); [0,1] floats map linearly to bytes."""
    arr = np.asarray(img)
    if arr.dtype.kind == "f":
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    elif arr.dtype != np.uint8:
        raise DataError(f"unsupported image dtype {arr.dtype}")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    pil = Image.fromarray(arr, mode="RGB")
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        pil.save(path, format="PPM")
    else:
        pil.save(path, format="PNG", compress_level=6)


def image_read(path: str | Path) -> np.ndarray:
    """(H, W, 3) float64 in [0,1]; bytes divide by 255. 16-bit input is rejected."""
    with Image.open(Path(path)) as pil:
        if pil.mode in ("I", "I;16", "I;16B", "I;16L", "I;16N"):
            raise FormatError(f"{path}: unsupported bit depth (mode {pil.mode})")
        rgb = pil.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
    return arr


@dataclass
class SceneBundle:
    """Everything a probe run consumes, loaded and cross-validated."""

    name: str
    root: Path
    images: list[np.ndarray]
    cameras: list[CameraModel]
    train_views: list[int]
    test_views: list[int]
    init_points: np.ndarray
    init_colors: np.ndarray
    feature_files: dict[str, dict[int, Path]] = field(default_factory=dict)
    gt_cloud: np.ndarray | None = None
    gt_cloud_colors: np.ndarray | None = None
    gt_depth: dict[int, np.ndarray] | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def train_pixel_count(self) -> int:
        return sum(self.images[v].shape[0] * self.images[v].shape[1] for v in self.train_views)

    def view_pixel_slices(self) -> dict[int, slice]:
        """Flat init-cloud slice per training view (view-major, row-major)."""
        out = {}
        offset = 0
        for v in self.train_views:
            h, w = self.images[v].shape[:2]
            out[v] = slice(offset, offset + h * w)
            offset += h * w
        return out


def camera_to_json(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation": [float(x) for x in cam.rotation],
        "translation": [float(x) for x in cam.translation],
        "near": cam.near,
    }


def camera_from_json(data: dict) -> CameraModel:
    try:
        return CameraModel(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            width=int(data["width"]), height=int(data["height"]),
            rotation=np.asarray(data["rotation"], dtype=np.float64),
            translation=np.asarray(data["translation"], dtype=np.float64),
            near=float(data.get("near", 0.01)),
        )
    except KeyError as exc:
        raise FormatError(f"camera entry missing field {exc}") from exc


def write_json(path: str | Path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_scene_config(scene_dir: str | Path, config: dict):
    write_json(Path(scene_dir) / "scene.json", config)


def load_scene(path: str | Path) -> SceneBundle:
    """Load and cross-validate a scene directory (or its scene.json)."""
    path = Path(path)
    cfg_path = path / "scene.json" if path.is_dir() else path
    if not cfg_path.exists():
        raise FormatError(f"scene config not found: {cfg_path}")
    try:
        cfg = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{cfg_path}: invalid JSON: {exc}") from exc
    if cfg.get("version") != 1:
        raise FormatError(f"{cfg_path}: unsupported scene config version {cfg.get('version')!r}")
    root = cfg_path.parent

    images = []
    for rel in cfg["images"]:
        img_path = root / rel
        if not img_path.exists():
            raise FormatError(f"missing image file: {img_path}")
        images.append(image_read(img_path))
    cameras = [camera_from_json(c) for c in cfg["cameras"]]
    if len(cameras) != len(images):
        raise AlignmentError(f"{len(images)} images but {len(cameras)} cameras")
    for i, (img, cam) in enumerate(zip(images, cameras)):
        if img.shape[:2] != (cam.height, cam.width):
            raise AlignmentError(
                f"view {i}: image is {img.shape[1]}x{img.shape[0]}, camera says "
                f"{cam.width}x{cam.height}"
            )

    train = [int(v) for v in cfg["train_views"]]
    test = [int(v) for v in cfg["test_views"]]
    if set(train) & set(test):
        raise AlignmentError(f"train/test overlap: {sorted(set(train) & set(test))}")
    if set(train) | set(test) != set(range(len(images))):
        raise AlignmentError(
            f"split does not cover views 0..{len(images) - 1}: train={train} test={test}"
        )

    init_path = root / cfg["init_cloud"]
    if not init_path.exists():
        raise FormatError(f"missing init cloud: {init_path}")
    points, colors, warnings = ply_read(init_path)

    expected = sum(images[v].shape[0] * images[v].shape[1] for v in train)
    if points.shape[0] != expected:
        raise AlignmentError(
            f"init cloud has {points.shape[0]} points but training views have "
            f"{expected} pixels (pixel-aligned cloud required)"
        )

    feature_files: dict[str, dict[int, Path]] = {}
    for tag, mapping in cfg.get("features", {}).items():
        per_view = {}
        for view_str, rel in mapping.items():
            fpath = root / rel
            if not fpath.exists():
                raise FormatError(f"feature tag {tag!r}: missing file for view {view_str}: {fpath}")
            per_view[int(view_str)] = fpath
        feature_files[tag] = per_view

    gt_cloud = gt_colors = None
    if "gt_cloud" in cfg:
        gt_path = root / cfg["gt_cloud"]
        if not gt_path.exists():
            raise FormatError(f"missing ground-truth cloud: {gt_path}")
        gt_cloud, gt_colors, w2 = ply_read(gt_path)
        warnings.extend(w2)
    gt_depth = None
    if "gt_depth" in cfg:
        gt_depth = {}
        for view_str, rel in cfg["gt_depth"].items():
            dpath = root / rel
            if not dpath.exists():
                raise FormatError(f"missing depth file for view {view_str}: {dpath}")
            gt_depth[int(view_str)] = ftz_read(dpath)

    return SceneBundle(
        name=cfg.get("name", root.name), root=root, images=images, cameras=cameras,
        train_views=train, test_views=test, init_points=points, init_colors=colors,
        feature_files=feature_files, gt_cloud=gt_cloud, gt_cloud_colors=gt_colors,
        gt_depth=gt_depth, warnings=warnings,
    )


def load_features(bundle: SceneBundle, tag: str) -> list[FeatureMap]:
    """Feature maps for the training views, in training-view order."""
    if tag not in bundle.feature_files:
        raise FormatError(
            f"scene has no feature tag {tag!r}; available: {sorted(bundle.feature_files)}"
        )
    mapping = bundle.feature_files[tag]
    out = []
    for v in bundle.train_views:
        if v not in mapping:
            raise FormatError(f"feature tag {tag!r} missing training view {v}")
        data = ftz_read(mapping[v])
        if data.ndim != 3:
            raise FormatError(f"feature file for view {v} must be 3D (H, W, C), got {data.shape}")
        out.append(FeatureMap(view_id=v, data=data.astype(np.float64), source_tag=tag))
    return out


REPORT_COLUMNS = ["scene", "feature", "mode", "view", "psnr_db", "ssim", "lpips", "mask_coverage"]


def report_csv_write(path: str | Path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in REPORT_COLUMNS})


def loss_history_write(path: str | Path, history: list[dict]):
    if not history:
        return
    cols = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(history)


def manifest_write(out_dir: str | Path, command: str, resolved: dict):
    """Reproducibility record written alongside every CLI output."""
    from splatprobe import __version__

    payload = {"command": command, "config": resolved, "package_version": __version__}
    write_json(Path(out_dir) / "manifest.json", payload)
