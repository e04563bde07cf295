"""Per-pixel feature maps: PCA channel reduction, bilinear resizing,
channel standardization, concatenation, and the IUVRGB baseline.

All operations are pure functions over immutable inputs. A feature map is
stored pixel-major (H, W, C) in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splatprobe.defaults import VARIANCE_FLOOR
from splatprobe.errors import DataError, ShapeError


@dataclass(frozen=True)
class FeatureMap:
    """Dense per-view feature tensor with provenance."""

    view_id: int
    data: np.ndarray  # (H, W, C) float64
    source_tag: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"feature map must be (H, W, C), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"feature map for view {self.view_id} has non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PcaBasis:
    """Top-k principal directions of a pooled pixel sample."""

    mean: np.ndarray                 # (C,)
    components: np.ndarray           # (k, C), orthonormal rows
    explained_variance: np.ndarray   # (k,), non-increasing

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "components", np.asarray(self.components, dtype=np.float64))
        object.__setattr__(
            self, "explained_variance", np.asarray(self.explained_variance, dtype=np.float64)
        )
        k = self.components.shape[0]
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(k), atol=1e-8):
            raise DataError("PCA components are not orthonormal")
        ev = self.explained_variance
        if np.any(ev[:-1] < ev[1:] - 1e-12):
            raise DataError("explained variance must be non-increasing")

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(samples: np.ndarray, k: int) -> PcaBasis:
    """Fit a k-component PCA basis to an (M, C) sample matrix.

    Eigendecomposition of the C x C sample covariance (divisor M - 1), with a
    deterministic sign convention: each component's largest-magnitude entry
    is made positive.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"samples must be (M, C), got {x.shape}")
    m, c = x.shape
    if m < 2:
        raise DataError(f"need at least 2 samples to fit PCA, got {m}")
    if k < 1 or k > min(m, c):
        raise DataError(f"invalid rank k={k} for {m}x{c} samples")
    if not np.all(np.isfinite(x)):
        raise DataError("PCA input has non-finite entries")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (m - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    variance = np.clip(eigvals[order], 0.0, None)
    comps = eigvecs[:, order].T.copy()
    for row in comps:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1.0
    return PcaBasis(mean=mean, components=comps, explained_variance=variance)


def pca_apply(fmap: FeatureMap, basis: PcaBasis) -> FeatureMap:
    """Project a feature map onto the basis; output has basis.k channels."""
    if fmap.channels != basis.mean.shape[0]:
        raise ShapeError(
            f"feature map has {fmap.channels} channels, basis expects {basis.mean.shape[0]}"
        )
    flat = fmap.data.reshape(-1, fmap.channels) - basis.mean
    codes = flat @ basis.components.T
    out = codes.reshape(fmap.height, fmap.width, basis.k)
    return FeatureMap(view_id=fmap.view_id, data=out, source_tag=f"{fmap.source_tag}+pca{basis.k}")


def pca_reconstruct(codes: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """Map (..., k) codes back to (..., C) feature space."""
    return np.asarray(codes, dtype=np.float64) @ basis.components + basis.mean


def upsample_bilinear(fmap: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    """Resize with half-pixel-center sampling and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    src = fmap.data
    in_h, in_w = src.shape[:2]
    if (out_h, out_w) == (in_h, in_w):
        return FeatureMap(view_id=fmap.view_id, data=src.copy(), source_tag=fmap.source_tag)

    def axis_coords(n_out, n_in):
        coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(np.int64)
        lo = np.minimum(lo, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return FeatureMap(view_id=fmap.view_id, data=out, source_tag=fmap.source_tag)


def iuvrgb_features(images: list[np.ndarray]) -> list[FeatureMap]:
    """Model-free 6-channel baseline: view index, pixel coordinates, color.

    Channels are [I, U, V, R, G, B], all in [0, 1]. I is the view index
    normalized by max(1, N - 1), U and V are half-pixel-center coordinates.
    """
    if not images:
        raise DataError("need at least one view")
    n = len(images)
    maps = []
    for idx, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ShapeError(f"view {idx}: expected (H, W, 3) RGB image, got {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise DataError(f"view {idx}: image values must lie in [0, 1]")
        h, w = img.shape[:2]
        u = (np.arange(w, dtype=np.float64) + 0.5) / w
        v = (np.arange(h, dtype=np.float64) + 0.5) / h
        data = np.empty((h, w, 6), dtype=np.float64)
        data[:, :, 0] = idx / max(1, n - 1)
        data[:, :, 1] = u[None, :]
        data[:, :, 2] = v[:, None]
        data[:, :, 3:] = img
        maps.append(FeatureMap(view_id=idx, data=data, source_tag="iuvrgb"))
    return maps


def channel_stats(maps: list[FeatureMap]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation pooled over all pixels of all maps."""
    if not maps:
        raise DataError("need at least one feature map")
    c = maps[0].channels
    for m in maps:
        if m.channels != c:
            raise ShapeError("all maps must share a channel count for pooled statistics")
    flat = np.concatenate([m.data.reshape(-1, c) for m in maps], axis=0)
    mean = flat.mean(axis=0)
    var = flat.var(axis=0)
    std = np.sqrt(np.maximum(var, VARIANCE_FLOOR))
    return mean, std


def standardize_channels(
    maps: FeatureMap | list[FeatureMap],
) -> FeatureMap | list[FeatureMap]:
    """Zero-mean unit-variance per channel over the pooled pixels of all inputs.

    Channels whose pooled variance is below the floor come out as all zeros.
    A single map standardizes against its own statistics.
    """
    single = isinstance(maps, FeatureMap)
    batch = [maps] if single else list(maps)
    mean, std = channel_stats(batch)
    degenerate = std <= np.sqrt(VARIANCE_FLOOR) * (1 + 1e-9)
    out = []
    for m in batch:
        data = (m.data - mean) / std
        if degenerate.any():
            data = data.copy()
            data[:, :, degenerate] = 0.0
        out.append(FeatureMap(view_id=m.view_id, data=data, source_tag=m.source_tag))
    return out[0] if single else out


def concat_features(maps: list[FeatureMap]) -> FeatureMap:
    """Channel-wise concatenation of same-view maps, in the order given.

    Callers choose the order (e.g. descending rank) and typically follow with
    pca_fit/pca_apply to bring the result back to the target channel count.
    """
    if not maps:
        raise DataError("need at least one feature map")
    h, w = maps[0].height, maps[0].width
    for m in maps[1:]:
        if (m.height, m.width) != (h, w):
            raise ShapeError(
                f"spatial mismatch: {m.height}x{m.width} vs {h}x{w} for view {m.view_id}"
            )
    data = np.concatenate([m.data for m in maps], axis=2)
    tag = "+".join(m.source_tag or "?" for m in maps)
    return FeatureMap(view_id=maps[0].view_id, data=data, source_tag=tag)
