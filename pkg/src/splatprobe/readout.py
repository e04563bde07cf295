"""The constrained readout: a 2-layer ReLU MLP mapping per-pixel features to
raw Gaussian attributes, decoded through fixed activation heads and merged
with free-optimized parameter banks according to the probing mode.

Probing modes partition the Gaussian attributes:
  Geometry: network supplies position/opacity/scale/rotation, bank supplies SH.
  Texture:  network supplies SH, bank supplies the geometric attributes.
  All:      network supplies everything; the bank is empty.
Raw (pre-activation) values are the optimization domain for bank entries too,
so the same decode applies to both sources.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from splatprobe.defaults import LOG_SCALE_CLAMP, MLP_HIDDEN, QUAT_W_BIAS, Y00
from splatprobe.errors import DataError, ShapeError
from splatprobe.renderer import GaussianCloud

ATTR_WIDTHS = {"position": 3, "opacity": 1, "scale": 3, "rotation": 4, "sh": 48}
ATTR_ORDER = ("position", "opacity", "scale", "rotation", "sh")
_OPACITY_EPS = 1e-6


class ProbeMode(enum.Enum):
    GEOMETRY = "G"
    TEXTURE = "T"
    ALL = "A"

    @classmethod
    def parse(cls, text: str) -> "ProbeMode":
        key = text.strip().upper()
        aliases = {"G": cls.GEOMETRY, "GEOMETRY": cls.GEOMETRY,
                   "T": cls.TEXTURE, "TEXTURE": cls.TEXTURE,
                   "A": cls.ALL, "ALL": cls.ALL}
        if key not in aliases:
            raise DataError(f"unknown probe mode {text!r} (expected G, T, or A)")
        return aliases[key]

    @property
    def readout_attrs(self) -> tuple[str, ...]:
        if self is ProbeMode.GEOMETRY:
            return ("position", "opacity", "scale", "rotation")
        if self is ProbeMode.TEXTURE:
            return ("sh",)
        return ATTR_ORDER

    @property
    def bank_attrs(self) -> tuple[str, ...]:
        return tuple(a for a in ATTR_ORDER if a not in self.readout_attrs)


@dataclass
class HeadLayout:
    """Slot offsets of attribute blocks inside a raw output vector."""

    attrs: tuple[str, ...]

    def __post_init__(self):
        seen = set()
        for a in self.attrs:
            if a not in ATTR_WIDTHS:
                raise DataError(f"unknown attribute {a!r}")
            if a in seen:
                raise DataError(f"duplicate attribute {a!r}")
            seen.add(a)
        self.attrs = tuple(a for a in ATTR_ORDER if a in seen)

    @property
    def width(self) -> int:
        return sum(ATTR_WIDTHS[a] for a in self.attrs)

    def slices(self) -> dict[str, slice]:
        out = {}
        offset = 0
        for a in self.attrs:
            out[a] = slice(offset, offset + ATTR_WIDTHS[a])
            offset += ATTR_WIDTHS[a]
        return out

    @classmethod
    def for_mode(cls, mode: ProbeMode) -> "HeadLayout":
        return cls(mode.readout_attrs)

    @classmethod
    def bank_for_mode(cls, mode: ProbeMode) -> "HeadLayout":
        return cls(mode.bank_attrs)


@dataclass
class MlpParams:
    """2-layer ReLU MLP: out = W2 relu(W1 x + b1) + b2."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        hidden, in_dim = self.w1.shape
        out_dim = self.w2.shape[0]
        if self.b1.shape != (hidden,) or self.w2.shape != (out_dim, hidden) \
                or self.b2.shape != (out_dim,):
            raise ShapeError("inconsistent MLP parameter shapes")
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise DataError("MLP parameters contain non-finite values")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(self.w1.astype(dtype), self.b1.astype(dtype),
                         self.w2.astype(dtype), self.b2.astype(dtype))


def mlp_init(in_dim: int, out_dim: int, seed: int, hidden: int = MLP_HIDDEN) -> MlpParams:
    """Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases."""
    if in_dim < 1 or out_dim < 1 or hidden < 1:
        raise DataError("MLP dimensions must be positive")
    rng = np.random.default_rng(seed)
    bound1 = math.sqrt(6.0 / in_dim)
    bound2 = math.sqrt(6.0 / hidden)
    return MlpParams(
        w1=rng.uniform(-bound1, bound1, size=(hidden, in_dim)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-bound2, bound2, size=(out_dim, hidden)),
        b2=np.zeros(out_dim),
    )


def mlp_forward(params: MlpParams, features: np.ndarray,
                want_cache: bool = False):
    """Per-row forward pass for features of shape (..., in_dim)."""
    x = np.asarray(features)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"features have {x.shape[-1]} channels, MLP expects {params.in_dim}")
    flat = x.reshape(-1, params.in_dim)
    hid = flat @ params.w1.T
    hid += params.b1
    np.maximum(hid, 0.0, out=hid)
    out = hid @ params.w2.T
    out += params.b2
    out = out.reshape(x.shape[:-1] + (params.out_dim,))
    if want_cache:
        return out, {"x": flat, "hid": hid}
    return out


def mlp_backward(params: MlpParams, cache: dict, d_out: np.ndarray,
                 want_dx: bool = True):
    """VJP of mlp_forward; returns (parameter grads dict, d_features).

    d_features is None when want_dx is False (features frozen).
    """
    d_flat = np.asarray(d_out).reshape(-1, params.out_dim)
    hid = cache["hid"]
    x = cache["x"]
    d_w2 = d_flat.T @ hid
    d_b2 = d_flat.sum(axis=0)
    d_pre = d_flat @ params.w2
    d_pre *= hid > 0.0
    d_w1 = d_pre.T @ x
    d_b1 = d_pre.sum(axis=0)
    d_x = d_pre @ params.w1 if want_dx else None
    grads = {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}
    return grads, d_x


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def heads_decode(raw: np.ndarray, layout: HeadLayout, base_scale: float) -> dict[str, np.ndarray]:
    """Raw attribute blocks to renderable values.

    position: identity (absolute world coordinates); opacity: sigmoid;
    scale: base_scale * exp(clamp(raw, +-8)); rotation: normalize(raw + w-bias);
    sh: identity reshaped to (N, 16, 3).
    """
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.shape[1] != layout.width:
        raise ShapeError(f"raw output must be (N, {layout.width}), got {raw.shape}")
    out = {}
    for attr, sl in layout.slices().items():
        block = raw[:, sl]
        if attr == "position":
            out[attr] = block.copy()
        elif attr == "opacity":
            out[attr] = np.clip(_sigmoid(block[:, 0]), _OPACITY_EPS, 1.0 - _OPACITY_EPS)
        elif attr == "scale":
            out[attr] = base_scale * np.exp(np.clip(block, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))
        elif attr == "rotation":
            biased = block.copy()
            biased[:, 0] += QUAT_W_BIAS
            norm = np.maximum(np.linalg.norm(biased, axis=1, keepdims=True), 1e-12)
            out[attr] = biased / norm
        else:  # sh
            out[attr] = block.reshape(-1, 16, 3)
    return out


def heads_decode_vjp(raw: np.ndarray, layout: HeadLayout, base_scale: float,
                     d_decoded: dict[str, np.ndarray]) -> np.ndarray:
    """Backward of heads_decode; d_decoded maps attribute -> decoded cotangent."""
    raw = np.asarray(raw)
    d_raw = np.zeros_like(raw)
    for attr, sl in layout.slices().items():
        if attr not in d_decoded:
            continue
        g = np.asarray(d_decoded[attr], dtype=raw.dtype)
        block = raw[:, sl]
        if attr == "position":
            d_raw[:, sl] = g
        elif attr == "opacity":
            s = _sigmoid(block[:, 0])
            inside = (s > _OPACITY_EPS) & (s < 1.0 - _OPACITY_EPS)
            d_raw[:, sl.start] = np.where(inside, g * s * (1.0 - s), 0.0)
        elif attr == "scale":
            clamped = np.clip(block, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
            inside = np.abs(block) < LOG_SCALE_CLAMP
            d_raw[:, sl] = np.where(inside, g * base_scale * np.exp(clamped), 0.0)
        elif attr == "rotation":
            biased = block.copy()
            biased[:, 0] += QUAT_W_BIAS
            norm = np.maximum(np.linalg.norm(biased, axis=1, keepdims=True), 1e-12)
            unit = biased / norm
            dot = np.sum(g * unit, axis=1, keepdims=True)
            d_raw[:, sl] = (g - dot * unit) / norm
        else:  # sh
            d_raw[:, sl] = g.reshape(g.shape[0], 48)
    return d_raw


@dataclass
class FreeBank:
    """Raw per-Gaussian parameters for every attribute the mode does not
    read out of features."""

    mode: ProbeMode
    raws: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        want = set(self.mode.bank_attrs)
        have = set(self.raws)
        if want != have:
            raise DataError(f"bank attributes {sorted(have)} do not complement "
                            f"mode {self.mode.value} (expected {sorted(want)})")

    @property
    def layout(self) -> HeadLayout:
        return HeadLayout.bank_for_mode(self.mode)

    def as_raw_matrix(self) -> np.ndarray:
        if not self.raws:
            n = 0
            return np.zeros((n, 0))
        blocks = []
        for attr in self.layout.attrs:
            arr = self.raws[attr]
            blocks.append(arr.reshape(arr.shape[0], -1))
        return np.concatenate(blocks, axis=1)

    def decode(self, base_scale: float) -> dict[str, np.ndarray]:
        if not self.raws:
            return {}
        return heads_decode(self.as_raw_matrix(), self.layout, base_scale)


def mean_knn_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Per-point mean Euclidean distance to the k nearest other points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        return np.full(pts.shape[0], 1e-3)
    kk = min(k, pts.shape[0] - 1)
    dist, _ = cKDTree(pts).query(pts, k=kk + 1)
    return dist[:, 1:].mean(axis=1)


def free_bank_init(points: np.ndarray, colors: np.ndarray, mode: ProbeMode,
                   base_scale: float) -> FreeBank:
    """Raw bank values reproducing the standard splat initialization after
    decode: positions at the init points, opacity 0.1, isotropic scale equal
    to the mean 3-NN distance, identity rotation, SH carrying the point color."""
    pts = np.asarray(points, dtype=np.float64)
    rgb = np.asarray(colors, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"points must be (N, 3), got {pts.shape}")
    if rgb.shape != pts.shape:
        raise ShapeError("colors must align with points")
    n = pts.shape[0]
    if n == 0:
        raise DataError("empty initialization cloud")
    raws = {}
    for attr in mode.bank_attrs:
        if attr == "position":
            raws[attr] = pts.copy()
        elif attr == "opacity":
            raws[attr] = np.full(n, math.log(0.1 / 0.9))
        elif attr == "scale":
            knn = np.maximum(mean_knn_distance(pts), 1e-7)
            raws[attr] = np.repeat(np.log(knn / base_scale)[:, None], 3, axis=1)
        elif attr == "rotation":
            raws[attr] = np.zeros((n, 4))
        else:  # sh
            sh = np.zeros((n, 16, 3))
            sh[:, 0, :] = (rgb - 0.5) / Y00
            raws[attr] = sh
    return FreeBank(mode=mode, raws=raws)


def raw_targets(mode: ProbeMode, points: np.ndarray, colors: np.ndarray,
                base_scale: float) -> np.ndarray:
    """Warm-start regression targets for the mode's read-out attributes,
    expressed in the raw (pre-activation) domain."""
    pts = np.asarray(points, dtype=np.float64)
    rgb = np.asarray(colors, dtype=np.float64)
    n = pts.shape[0]
    layout = HeadLayout.for_mode(mode)
    target = np.zeros((n, layout.width))
    sl = layout.slices()
    if "position" in sl:
        target[:, sl["position"]] = pts
    if "opacity" in sl:
        target[:, sl["opacity"].start] = math.log(0.1 / 0.9)
    if "scale" in sl:
        knn = np.maximum(mean_knn_distance(pts), 1e-7)
        target[:, sl["scale"]] = np.log(knn / base_scale)[:, None]
    # rotation target stays zero: identity after the w-bias
    if "sh" in sl:
        sh = np.zeros((n, 16, 3))
        sh[:, 0, :] = (rgb - 0.5) / Y00
        target[:, sl["sh"]] = sh.reshape(n, 48)
    return target


def assemble_cloud(mode: ProbeMode, readout: dict[str, np.ndarray],
                   bank: dict[str, np.ndarray], check: bool = True) -> GaussianCloud:
    """Merge decoded readout and bank attributes into a renderable cloud.

    Every attribute must come from exactly one source, matching the mode;
    that complement is asserted on every call. `check=False` skips only the
    numeric array validation (hot training loops re-check periodically).
    """
    overlap = set(readout) & set(bank)
    if overlap:
        raise DataError(f"attributes supplied twice: {sorted(overlap)}")
    merged = {**bank, **readout}
    if set(merged) != set(ATTR_ORDER):
        raise DataError(f"incomplete attribute set: {sorted(merged)}")
    if set(readout) != set(mode.readout_attrs) or set(bank) != set(mode.bank_attrs):
        raise DataError(
            f"attribute sources do not match mode {mode.value}: "
            f"readout={sorted(readout)} bank={sorted(bank)}"
        )
    cloud = GaussianCloud(
        positions=merged["position"],
        opacities=merged["opacity"],
        scales=merged["scale"],
        rotations=merged["rotation"],
        sh=merged["sh"],
    )
    if check:
        cloud.validate()
    return cloud
