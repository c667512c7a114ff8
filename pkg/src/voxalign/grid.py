"""Dense voxel grids, indexing, and multi-resolution label handling.

Voxels are stored x-major: a grid of shape ``(X, Y, Z)`` is linearized as
``idx = x * (Y * Z) + y * Z + z``, which is numpy's C order for that shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np


class GridError(ValueError):
    """Raised for bounds and shape violations on voxel grids."""


@dataclass(frozen=True)
class GridDims:
    x: int
    y: int
    z: int

    def __post_init__(self):
        for name in ("x", "y", "z"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise GridError(f"grid dimension {name}={v!r} must be a positive integer")
            object.__setattr__(self, name, int(v))
        if self.x * self.y * self.z >= 2**31:
            raise GridError("grids with 2**31 or more voxels are not supported")

    @classmethod
    def of(cls, dims) -> "GridDims":
        if isinstance(dims, GridDims):
            return dims
        x, y, z = dims
        return cls(x, y, z)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.x, self.y, self.z)

    @property
    def count(self) -> int:
        return self.x * self.y * self.z

    def __iter__(self):
        return iter(self.shape)


SEMANTIC_KITTI_DIMS = GridDims(256, 256, 32)
SEMANTIC_KITTI_ORIGIN = (0.0, -25.6, -2.0)
SEMANTIC_KITTI_VOXEL_SIZE = 0.2


@dataclass(frozen=True)
class GridGeometry:
    """Metric placement of a grid; ``origin`` is the minimum corner of voxel (0, 0, 0)."""

    dims: GridDims = SEMANTIC_KITTI_DIMS
    origin: tuple[float, float, float] = SEMANTIC_KITTI_ORIGIN
    voxel_size: float = SEMANTIC_KITTI_VOXEL_SIZE

    def __post_init__(self):
        object.__setattr__(self, "dims", GridDims.of(self.dims))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(self.origin) != 3:
            raise GridError("origin must be a 3-vector")
        if not self.voxel_size > 0:
            raise GridError(f"voxel_size must be positive, got {self.voxel_size}")

    @classmethod
    def semantic_kitti(cls, dims=SEMANTIC_KITTI_DIMS) -> "GridGeometry":
        """SemanticKITTI volume ([0, 51.2] x [-25.6, 25.6] x [-2, 4.4] m) at the given resolution."""
        dims = GridDims.of(dims)
        return cls(dims, SEMANTIC_KITTI_ORIGIN, 51.2 / dims.x)

    def scaled(self, factor: int) -> "GridGeometry":
        """Geometry of the same volume with every dimension divided by ``factor``."""
        d = self.dims
        if d.x % factor or d.y % factor or d.z % factor:
            raise GridError(f"dims {d.shape} not divisible by {factor}")
        return GridGeometry(GridDims(d.x // factor, d.y // factor, d.z // factor),
                            self.origin, self.voxel_size * factor)

    def centroids(self) -> np.ndarray:
        """All voxel centroids as an ``(X, Y, Z, 3)`` array in meters."""
        axes = [self.origin[i] + (np.arange(n) + 0.5) * self.voxel_size
                for i, n in enumerate(self.dims.shape)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass(frozen=True)
class ClassTable:
    names: tuple[str, ...]
    empty_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise GridError("a class table needs at least two classes")
        if len(set(self.names)) != len(self.names):
            raise GridError("class names must be unique")
        if self.empty_id != 0:
            raise GridError("the empty class id is fixed at 0")

    @property
    def count(self) -> int:
        return len(self.names)


SEMANTIC_KITTI_CLASSES = ClassTable((
    "empty", "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person",
    "bicyclist", "motorcyclist", "road", "parking", "sidewalk", "other-ground",
    "building", "fence", "vegetation", "trunk", "terrain", "pole", "traffic-sign",
))


@dataclass(frozen=True)
class ResolutionPair:
    high: GridDims
    low: GridDims

    def __post_init__(self):
        object.__setattr__(self, "high", GridDims.of(self.high))
        object.__setattr__(self, "low", GridDims.of(self.low))
        h, lo = self.high, self.low
        if h.x % lo.x:
            raise GridError(f"high {h.shape} is not an integer multiple of low {lo.shape}")
        lam = h.x // lo.x
        if (h.x, h.y, h.z) != (lam * lo.x, lam * lo.y, lam * lo.z):
            raise GridError(f"high {h.shape} and low {lo.shape} do not share one integer ratio")

    @property
    def ratio(self) -> int:
        return self.high.x // self.low.x


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """Per-voxel class ids with an optional invalid mask (never encoded as a class)."""

    geometry: GridGeometry
    labels: np.ndarray
    invalid_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        shape = self.geometry.dims.shape
        if labels.shape != shape:
            labels = labels.reshape(shape) if labels.size == self.geometry.dims.count else None
            if labels is None:
                raise GridError(f"labels do not match grid dims {shape}")
        if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max):
            raise GridError("labels must fit in unsigned 16 bits")
        labels = labels.astype(np.uint16)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if self.invalid_mask is not None:
            mask = np.asarray(self.invalid_mask, dtype=bool).reshape(shape).copy()
            mask.flags.writeable = False
            object.__setattr__(self, "invalid_mask", mask)

    @property
    def dims(self) -> GridDims:
        return self.geometry.dims

    def valid(self) -> np.ndarray:
        if self.invalid_mask is None:
            return np.ones(self.dims.shape, dtype=bool)
        return ~self.invalid_mask

    def check_classes(self, table: ClassTable) -> None:
        if self.labels.size and int(self.labels.max()) >= table.count:
            raise GridError(f"label {int(self.labels.max())} outside class table of {table.count}")


def _check_point(p, dims: GridDims) -> tuple[int, int, int]:
    x, y, z = (int(v) for v in p)
    if not (0 <= x < dims.x and 0 <= y < dims.y and 0 <= z < dims.z):
        raise GridError(f"voxel {(x, y, z)} out of bounds for dims {dims.shape}")
    return x, y, z


def linear_index(p, dims) -> int:
    dims = GridDims.of(dims)
    x, y, z = _check_point(p, dims)
    return x * (dims.y * dims.z) + y * dims.z + z


def unravel_index(idx: int, dims) -> tuple[int, int, int]:
    dims = GridDims.of(dims)
    if not 0 <= idx < dims.count:
        raise GridError(f"index {idx} out of bounds for {dims.count} voxels")
    x, rem = divmod(int(idx), dims.y * dims.z)
    y, z = divmod(rem, dims.z)
    return x, y, z


def voxel_centroid(p, geom: GridGeometry) -> np.ndarray:
    x, y, z = _check_point(p, geom.dims)
    return np.asarray(geom.origin) + (np.array([x, y, z], dtype=float) + 0.5) * geom.voxel_size


class Adjacency(Enum):
    SURFACE = 1
    EDGE = 2
    VERTEX = 3


def _offsets():
    out = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                nz = (dx != 0) + (dy != 0) + (dz != 0)
                if nz:
                    out.append(((dx, dy, dz), Adjacency(nz)))
    return tuple(out)


NEIGHBORHOOD26 = _offsets()


def neighborhood26(p=None) -> tuple[tuple[tuple[int, int, int], Adjacency], ...]:
    """The 26 cube offsets around a voxel, tagged by how many axes are nonzero.

    Offsets do not depend on ``p``; the argument only exists for call-site symmetry.
    """
    return NEIGHBORHOOD26


def adjacency_of(offset) -> Adjacency:
    nz = sum(1 for v in offset if v != 0)
    if nz == 0 or any(abs(v) > 1 for v in offset):
        raise GridError(f"{tuple(offset)} is not a 26-neighborhood offset")
    return Adjacency(nz)


def blocks(arr: np.ndarray, factor: int) -> np.ndarray:
    """View a ``(X, Y, Z, ...)`` array as ``(X/f, Y/f, Z/f, f**3, ...)`` child blocks."""
    X, Y, Z = arr.shape[:3]
    if X % factor or Y % factor or Z % factor:
        raise GridError(f"dims {(X, Y, Z)} not divisible by factor {factor}")
    rest = arr.shape[3:]
    f = factor
    b = arr.reshape(X // f, f, Y // f, f, Z // f, f, *rest)
    order = (0, 2, 4, 1, 3, 5) + tuple(range(6, 6 + len(rest)))
    return b.transpose(order).reshape(X // f, Y // f, Z // f, f**3, *rest)


def rescale_labels(grid: LabelGrid, factor: int) -> LabelGrid:
    """Majority-vote downscaling of a label grid.

    Ties go to a non-empty label when one is tied for the maximum, then to
    the smallest class id. A coarse voxel is invalid only when all of its
    children are invalid.
    """
    if int(factor) != factor or factor < 1:
        raise GridError(f"factor must be a positive integer, got {factor}")
    geom = grid.geometry.scaled(factor)
    if factor == 1:
        return grid
    children = blocks(grid.labels, factor).astype(np.int64)
    ncls = int(grid.labels.max()) + 1 if grid.labels.size else 1
    flat = children.reshape(-1, factor**3)
    counts = np.zeros((flat.shape[0], ncls), dtype=np.int64)
    np.add.at(counts, (np.arange(flat.shape[0])[:, None], flat), 1)
    # doubling keeps count order; +1 lifts non-empty above empty on a tie
    key = counts * 2
    key[:, 1:] += 1
    key[counts == 0] = -1
    out = key.argmax(axis=1).reshape(geom.dims.shape)
    invalid = None
    if grid.invalid_mask is not None:
        invalid = blocks(grid.invalid_mask, factor).all(axis=3)
    return LabelGrid(geom, out, invalid)


def class_histogram(labels: np.ndarray, count: Optional[int] = None, mask=None) -> np.ndarray:
    vals = np.asarray(labels).ravel()
    if mask is not None:
        vals = vals[np.asarray(mask, dtype=bool).ravel()]
    n = count if count is not None else (int(vals.max()) + 1 if vals.size else 1)
    return np.bincount(vals.astype(np.int64), minlength=n)
