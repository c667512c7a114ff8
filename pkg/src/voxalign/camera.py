"""Pinhole camera model: projection, field-of-view tests and depth back-projection.

Pixel ``(0, 0)`` covers ``[0, 1) x [0, 1)`` in continuous image coordinates,
so its center sits at ``(0.5, 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridGeometry


class CameraError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CameraRig:
    """Intrinsics ``K`` plus a world->camera pose ``x_cam = R @ x_world + t``."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_size: tuple[int, int]
    tol: float = 1e-9

    def __post_init__(self):
        K = np.array(self.K, dtype=float).reshape(3, 3)
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise CameraError(f"K must be upper-triangular with K[2,2] = 1, got\n{K}")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise CameraError("focal lengths must be positive")
        if np.abs(R @ R.T - np.eye(3)).max() > self.tol or abs(np.linalg.det(R) - 1) > self.tol:
            raise CameraError(f"R is not a proper rotation within {self.tol}")
        w, h = (int(v) for v in self.image_size)
        if w <= 0 or h <= 0:
            raise CameraError(f"image size must be positive, got {self.image_size}")
        for name, arr in (("K", K), ("R", R), ("t", t)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "image_size", (w, h))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, image_size, R=None, t=None) -> "CameraRig":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(3) if R is None else R, np.zeros(3) if t is None else t, image_size)

    @classmethod
    def look_at(cls, position, target, K, image_size, up=(0.0, 0.0, 1.0)) -> "CameraRig":
        """Camera at ``position`` with its optical axis (+z) toward ``target``; image y points down."""
        position = np.asarray(position, dtype=float)
        fwd = np.asarray(target, dtype=float) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=float))
        if np.linalg.norm(right) < 1e-12:
            raise CameraError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(K, R, -R @ position, image_size)

    @classmethod
    def forward_x(cls, K, image_size, position=(0.0, 0.0, 0.0)) -> "CameraRig":
        """Grid-frame camera looking along +x with z up (the KITTI velodyne->camera axes)."""
        R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        return cls(K, R, -R @ np.asarray(position, dtype=float), image_size)


def project_points(points: np.ndarray, rig: CameraRig):
    """Vectorized projection of ``(..., 3)`` world points to ``(u, v, z_cam)`` arrays.

    Points on the camera plane yield non-finite ``u, v``; callers that need an
    error use :func:`project_point`.
    """
    pts = np.asarray(points, dtype=float)
    cam = pts @ rig.R.T + rig.t
    pix = cam @ rig.K.T
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pix[..., 0] / z
        v = pix[..., 1] / z
    return u, v, z


def project_point(p, rig: CameraRig) -> tuple[float, float, float]:
    cam = rig.R @ np.asarray(p, dtype=float).reshape(3) + rig.t
    z = cam[2]
    if abs(z) < 1e-12:
        raise CameraError(f"point {tuple(p)} lies on the camera plane (z_cam = {z})")
    pix = rig.K @ cam
    return float(pix[0] / z), float(pix[1] / z), float(z)


def in_fov(u, v, z_cam, rig: CameraRig):
    """True where the point is in front of the camera and inside the half-open image bounds."""
    u, v, z = np.asarray(u), np.asarray(v), np.asarray(z_cam)
    res = (z > 0) & (u >= 0) & (u < rig.width) & (v >= 0) & (v < rig.height)
    return bool(res) if res.ndim == 0 else res


def fov_mask(geom: GridGeometry, rig: CameraRig) -> np.ndarray:
    u, v, z = project_points(geom.centroids(), rig)
    with np.errstate(invalid="ignore"):
        return in_fov(u, v, z, rig)


def backproject_pixels(u, v, d, rig: CameraRig) -> np.ndarray:
    """Vectorized inverse projection; returns ``(..., 3)`` world points."""
    u, v, d = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, v, d)))
    if np.any(~(d > 0)):
        raise CameraError("depth must be positive")
    try:
        Kinv = np.linalg.inv(rig.K)
    except np.linalg.LinAlgError as exc:
        raise CameraError("intrinsics matrix is singular") from exc
    ray = np.stack([u * d, v * d, d], axis=-1)
    cam = ray @ Kinv.T
    # R^-1 = R^T for a rotation
    return (cam - rig.t) @ rig.R


def backproject_pixel(u, v, d, rig: CameraRig) -> np.ndarray:
    if not d > 0:
        raise CameraError(f"invalid depth {d}")
    return backproject_pixels(u, v, d, rig).reshape(3)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Row-major ``(height, width)`` depths in meters; values <= 0 mark invalid pixels."""

    depth: np.ndarray

    def __post_init__(self):
        d = np.array(self.depth, dtype=float)
        if d.ndim != 2:
            raise CameraError("depth map must be 2-D (height, width)")
        if not np.all(np.isfinite(d)):
            raise CameraError("depth map contains non-finite values")
        d.flags.writeable = False
        object.__setattr__(self, "depth", d)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def valid(self) -> np.ndarray:
        return self.depth > 0


def backproject_depthmap(dm: DepthMap, rig: CameraRig) -> np.ndarray:
    """Point cloud of all valid pixels, sampled at pixel centers, in row-major order."""
    rows, cols = np.nonzero(dm.valid())
    if rows.size == 0:
        return np.zeros((0, 3))
    return backproject_pixels(cols + 0.5, rows + 0.5, dm.depth[rows, cols], rig)
