"""2D->3D feature lifting, seed selection and cross-resolution seed fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import CameraRig, in_fov, project_points
from .grid import GridError, GridGeometry, ResolutionPair, blocks


@dataclass(frozen=True, eq=False)
class FeatureMap2D:
    """Image feature map stored as ``(height, width, channels)``.

    ``downscale`` is the number of full-image pixels per feature cell.
    """

    values: np.ndarray
    downscale: float = 16.0

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 2:
            vals = vals[..., None]
        if vals.ndim != 3:
            raise GridError("feature map must be (height, width, channels)")
        if not np.all(np.isfinite(vals)):
            raise GridError("feature map contains non-finite values")
        if not self.downscale >= 1:
            raise GridError(f"downscale must be >= 1, got {self.downscale}")
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Per-voxel vectors stored as ``(X, Y, Z, C)``; :attr:`flat` is the ``(voxel, channel)`` view."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        shape = self.geometry.dims.shape
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[:3] != shape:
            if vals.ndim == 2 and vals.shape[0] == self.geometry.dims.count:
                vals = vals.reshape(*shape, vals.shape[1])
            else:
                raise GridError(f"feature values {vals.shape} do not match dims {shape}")
        if vals.ndim == 3:
            vals = vals[..., None]
        if not np.all(np.isfinite(vals)):
            raise GridError("feature grid contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.channels)


@dataclass(frozen=True, eq=False)
class ScoreGrid:
    geometry: GridGeometry
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float).reshape(self.geometry.dims.shape)
        if s.size and (np.isnan(s).any() or s.min() < 0 or s.max() > 1):
            raise GridError("scores must lie in [0, 1]")
        object.__setattr__(self, "scores", s)


@dataclass(frozen=True, eq=False)
class SeedSet:
    indices: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        feats = np.asarray(self.features, dtype=float)
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise GridError("seed indices must be strictly increasing")
        if feats.ndim != 2 or feats.shape[0] != idx.size:
            raise GridError("one feature row per seed index is required")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "features", feats)

    def __len__(self):
        return self.indices.size

    def to_dense(self, geom: GridGeometry) -> FeatureGrid:
        """Scatter back into a dense grid with non-seed voxels zeroed."""
        out = np.zeros((geom.dims.count, self.features.shape[1]))
        out[self.indices] = self.features
        return FeatureGrid(geom, out)


def bilinear_sample(values: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``(H, W, C)`` at continuous cell coordinates (cell ``i`` centered at ``i``).

    Coordinates beyond the outer cell centers clamp to the border.
    """
    H, W = values.shape[:2]
    x = np.clip(x, 0, W - 1)
    y = np.clip(y, 0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    top = values[y0, x0] * (1 - wx) + values[y0, x1] * wx
    bot = values[y1, x0] * (1 - wx) + values[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def sample_features(maps: Sequence[tuple[FeatureMap2D, CameraRig]], geom: GridGeometry) -> FeatureGrid:
    """Lift image features onto voxel centroids, averaging over the views that see each voxel.

    Voxels outside every view keep a zero vector.
    """
    if len(maps) == 0:
        raise GridError("at least one feature map is required")
    channels = {fm.channels for fm, _ in maps}
    if len(channels) != 1:
        raise GridError(f"feature maps disagree on channel count: {sorted(channels)}")
    C = channels.pop()
    pts = geom.centroids().reshape(-1, 3)
    total = np.zeros((pts.shape[0], C))
    seen = np.zeros(pts.shape[0], dtype=np.int64)
    for fm, rig in maps:
        u, v, z = project_points(pts, rig)
        with np.errstate(invalid="ignore"):
            mask = in_fov(u, v, z, rig)
        if not mask.any():
            continue
        s = fm.downscale
        total[mask] += bilinear_sample(fm.values, u[mask] / s - 0.5, v[mask] / s - 0.5)
        seen += mask
    weight = np.where(seen > 0, 1.0 / np.maximum(seen, 1), 1.0)
    return FeatureGrid(geom, total * weight[:, None])


def _same_geometry(a: GridGeometry, b: GridGeometry):
    if a.dims != b.dims:
        raise GridError(f"geometry mismatch: {a.dims.shape} vs {b.dims.shape}")


def select_seeds(feat: FeatureGrid, proposals: ScoreGrid, theta: float = 0.5) -> SeedSet:
    _same_geometry(feat.geometry, proposals.geometry)
    idx = np.flatnonzero(proposals.scores.ravel() > theta)
    return SeedSet(idx, feat.flat[idx])


def seed_mask(feat: FeatureGrid, proposals: ScoreGrid, theta: float = 0.5) -> FeatureGrid:
    """Dense grid keeping seed voxels and zeroing the rest."""
    return select_seeds(feat, proposals, theta).to_dense(feat.geometry)


def _interp_axis(a: np.ndarray, axis: int, factor: int) -> np.ndarray:
    n = a.shape[axis]
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w = src - i0
    shape = [1] * a.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - w) + np.take(a, i1, axis=axis) * w


def upsample_trilinear(feat: FeatureGrid, factor: int) -> FeatureGrid:
    """Trilinear upsampling with half-pixel (align-corners off) sampling and border clamping."""
    if int(factor) != factor or factor < 1:
        raise GridError(f"factor must be a positive integer, got {factor}")
    g = feat.geometry
    geom = GridGeometry(tuple(n * factor for n in g.dims.shape), g.origin, g.voxel_size / factor)
    if factor == 1:
        return FeatureGrid(geom, feat.values.copy())
    out = feat.values
    for axis in range(3):
        out = _interp_axis(out, axis, factor)
    return FeatureGrid(geom, out)


def downsample_avgpool(feat: FeatureGrid, factor: int) -> FeatureGrid:
    if int(factor) != factor or factor < 1:
        raise GridError(f"factor must be a positive integer, got {factor}")
    geom = feat.geometry.scaled(factor)
    return FeatureGrid(geom, blocks(feat.values, factor).mean(axis=3))


def fuse_seeds(high: FeatureGrid, low: FeatureGrid, pair: ResolutionPair,
               sequential: bool = True) -> tuple[FeatureGrid, FeatureGrid]:
    """Exchange features between two resolution levels.

    The high level first absorbs the upsampled low level; the low level then
    absorbs the pooled high level (the updated one when ``sequential``, the
    original one otherwise).
    """
    if high.geometry.dims != pair.high or low.geometry.dims != pair.low:
        raise GridError(f"grids {high.geometry.dims.shape}/{low.geometry.dims.shape} "
                        f"do not match pair {pair.high.shape}/{pair.low.shape}")
    if high.channels != low.channels:
        raise GridError("channel mismatch between resolution levels")
    lam = pair.ratio
    new_high = FeatureGrid(high.geometry, high.values + upsample_trilinear(low, lam).values)
    src = new_high if sequential else high
    new_low = FeatureGrid(low.geometry, low.values + downsample_avgpool(src, lam).values)
    return new_high, new_low
