"""Deterministic synthetic scenes and brute-force reference implementations.

The oracles here deliberately avoid the vectorized kernels they check: they
loop voxel by voxel in plain Python with double precision. Nothing in this
module imports from ``csa``, ``cda`` or ``metrics``.

Randomness comes from SplitMix64 (Steele, Lea & Flood 2014)::

    state += 0x9E3779B97F4A7C15
    z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

with all arithmetic modulo 2**64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .camera import CameraRig, DepthMap
from .grid import ClassTable, GridDims, GridGeometry, LabelGrid

MASK64 = (1 << 64) - 1


class SpecError(ValueError):
    pass


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection, so no modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53


@dataclass(frozen=True)
class Box:
    """Axis-aligned block of voxels ``lo <= p < hi`` painted with ``class_id``."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    class_id: int


def ground_plane(dims: GridDims, z_lo: int, z_hi: int, class_id: int) -> Box:
    return Box((0, 0, z_lo), (dims.x, dims.y, z_hi), class_id)


@dataclass(frozen=True)
class RandomBoxes:
    count: int
    max_extent: int
    classes: tuple[int, ...]


@dataclass(frozen=True)
class SceneSpec:
    dims: GridDims
    classes: ClassTable
    primitives: tuple[Box, ...] = ()
    cameras: tuple[CameraRig, ...] = ()
    seed: int = 0
    random_boxes: Optional[RandomBoxes] = None
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    voxel_size: float = 0.2

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.dims, self.origin, self.voxel_size)

    @classmethod
    def from_json(cls, doc: Union[str, dict]) -> "SceneSpec":
        if isinstance(doc, str):
            doc = json.loads(doc)
        dims = GridDims.of(doc["dims"])
        classes = ClassTable(doc["classes"])
        prims = []
        for p in doc.get("primitives", []):
            if p.get("type", "box") == "ground":
                prims.append(ground_plane(dims, p["z_lo"], p["z_hi"], p["class_id"]))
            else:
                prims.append(Box(tuple(p["lo"]), tuple(p["hi"]), p["class_id"]))
        cams = tuple(_camera_from_json(c) for c in doc.get("cameras", []))
        rb = doc.get("random_boxes")
        rb = RandomBoxes(rb["count"], rb["max_extent"], tuple(rb["classes"])) if rb else None
        return cls(dims, classes, tuple(prims), cams, int(doc.get("seed", 0)), rb,
                   tuple(doc.get("origin", (0.0, 0.0, 0.0))), float(doc.get("voxel_size", 0.2)))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(Path(path).read_text())


def _camera_from_json(c: dict) -> CameraRig:
    size = tuple(c["image_size"])
    if "K" in c:
        K = np.asarray(c["K"], dtype=float)
    else:
        K = np.array([[c["fx"], 0, c["cx"]], [0, c["fy"], c["cy"]], [0, 0, 1]], dtype=float)
    if "look_at" in c:
        return CameraRig.look_at(c["position"], c["look_at"], K, size, c.get("up", (0, 0, 1)))
    return CameraRig(K, c["R"], c["t"], size)


def _check_box(b: Box, spec: SceneSpec):
    for lo, hi, n in zip(b.lo, b.hi, spec.dims.shape):
        if not 0 <= lo < hi <= n:
            raise SpecError(f"primitive {b} leaves the {spec.dims.shape} grid")
    if not 0 <= b.class_id < spec.classes.count:
        raise SpecError(f"primitive class {b.class_id} not in the class table")


def _random_boxes(spec: SceneSpec) -> list[Box]:
    rb = spec.random_boxes
    if rb is None:
        return []
    rng = SplitMix64(spec.seed)
    out = []
    for _ in range(rb.count):
        ext = [1 + rng.below(min(rb.max_extent, n)) for n in spec.dims.shape]
        lo = [rng.below(n - e + 1) for n, e in zip(spec.dims.shape, ext)]
        cls_id = rb.classes[rng.below(len(rb.classes))]
        out.append(Box(tuple(lo), tuple(a + e for a, e in zip(lo, ext)), cls_id))
    return out


def paint(spec: SceneSpec) -> LabelGrid:
    labels = np.zeros(spec.dims.shape, dtype=np.uint16)
    for b in list(spec.primitives) + _random_boxes(spec):
        _check_box(b, spec)
        labels[b.lo[0]:b.hi[0], b.lo[1]:b.hi[1], b.lo[2]:b.hi[2]] = b.class_id
    return LabelGrid(spec.geometry, labels)


def cast_ray(occupied: np.ndarray, geom: GridGeometry, origin, direction):
    """First occupied voxel along ``origin + s * direction`` for ``s >= 0`` (3D DDA).

    Returns ``(voxel, s_mid)`` where ``s_mid`` is the midpoint of the ray's
    parameter interval inside that voxel, or ``None`` on a miss.
    """
    size = geom.voxel_size
    o = [(origin[i] - geom.origin[i]) / size for i in range(3)]
    d = [direction[i] / size for i in range(3)]
    dims = geom.dims.shape
    s_in, s_out = 0.0, math.inf
    for i in range(3):
        if d[i] == 0.0:
            if not 0.0 <= o[i] < dims[i]:
                return None
            continue
        a = (0.0 - o[i]) / d[i]
        b = (dims[i] - o[i]) / d[i]
        if a > b:
            a, b = b, a
        s_in = max(s_in, a)
        s_out = min(s_out, b)
    if s_in >= s_out:
        return None
    cell, step, t_max, t_delta = [], [], [], []
    for i in range(3):
        c = int(math.floor(o[i] + d[i] * s_in))
        c = min(max(c, 0), dims[i] - 1)
        cell.append(c)
        if d[i] > 0:
            step.append(1)
            t_max.append((c + 1 - o[i]) / d[i])
            t_delta.append(1.0 / d[i])
        elif d[i] < 0:
            step.append(-1)
            t_max.append((c - o[i]) / d[i])
            t_delta.append(-1.0 / d[i])
        else:
            step.append(0)
            t_max.append(math.inf)
            t_delta.append(math.inf)
    s_enter = s_in
    while True:
        axis = min(range(3), key=lambda j: t_max[j])
        s_leave = min(t_max[axis], s_out)
        if occupied[cell[0], cell[1], cell[2]]:
            return tuple(cell), 0.5 * (s_enter + s_leave)
        cell[axis] += step[axis]
        if not 0 <= cell[axis] < dims[axis]:
            return None
        s_enter = t_max[axis]
        t_max[axis] += t_delta[axis]


def render_depth(labels: LabelGrid, rig: CameraRig) -> tuple[DepthMap, np.ndarray]:
    """Depth at every pixel center plus the ``(H, W, 3)`` voxel hit by each ray (-1 on miss).

    Depth is the camera-frame z of the midpoint of the ray's run through the
    first occupied voxel, so back-projection lands strictly inside it.
    """
    occ = labels.labels != 0
    W, H = rig.image_size
    Kinv = np.linalg.inv(rig.K)
    center = rig.center
    depth = np.zeros((H, W))
    hits = np.full((H, W, 3), -1, dtype=np.int64)
    for row in range(H):
        for col in range(W):
            # direction with unit camera-frame z, so the ray parameter is the depth
            d_cam = Kinv @ np.array([col + 0.5, row + 0.5, 1.0])
            d_world = rig.R.T @ d_cam
            res = cast_ray(occ, labels.geometry, center, d_world)
            if res is not None:
                hits[row, col] = res[0]
                depth[row, col] = res[1]
    return DepthMap(depth), hits


def generate_scene(spec: SceneSpec) -> tuple[LabelGrid, list[CameraRig], list[DepthMap]]:
    labels = paint(spec)
    depths = [render_depth(labels, rig)[0] for rig in spec.cameras]
    return labels, list(spec.cameras), depths


def occupancy_scene(dims, fraction: float, seed: int, class_ids: Sequence[int] = (1,),
                    classes: Optional[ClassTable] = None) -> SceneSpec:
    """Scene made of unit boxes covering exactly ``round(fraction * N)`` voxels."""
    dims = GridDims.of(dims)
    n = dims.count
    target = int(round(fraction * n))
    rng = SplitMix64(seed)
    order = list(range(n))
    for i in range(target):
        j = i + rng.below(n - i)
        order[i], order[j] = order[j], order[i]
    prims = []
    for idx in sorted(order[:target]):
        x, rem = divmod(idx, dims.y * dims.z)
        y, z = divmod(rem, dims.z)
        cls_id = class_ids[rng.below(len(class_ids))]
        prims.append(Box((x, y, z), (x + 1, y + 1, z + 1), cls_id))
    table = classes or ClassTable(tuple(["empty"] + [f"class{i}" for i in range(1, max(class_ids) + 1)]))
    return SceneSpec(dims, table, tuple(prims), seed=seed)


# ---------------------------------------------------------------- oracles

def oracle_csa(v_re: LabelGrid, params) -> dict:
    """Literal neighbor enumeration over every voxel and all 26 offsets.

    The grid is copied into a flat list framed by one layer of border cells
    (``None`` under the skip policy, empty under pad-empty), so every
    neighbor lookup is a single list access.

    Returns a dict of ``(X, Y, Z)`` arrays ``s_surface``, ``s_edge``,
    ``s_vertex`` (int) and ``s_csa`` (float).
    """
    X, Y, Z = v_re.dims.shape
    border = 0 if params.border_policy == "pad-empty" else None
    PY, PZ = Y + 2, Z + 2
    flat = [border] * ((X + 2) * PY * PZ)
    lab = v_re.labels.tolist()
    for x in range(X):
        for y in range(Y):
            base = ((x + 1) * PY + (y + 1)) * PZ + 1
            flat[base:base + Z] = lab[x][y]
    groups = ([], [], [])
    for a in (-1, 0, 1):
        for b in (-1, 0, 1):
            for c in (-1, 0, 1):
                n = abs(a) + abs(b) + abs(c)
                if n:
                    groups[n - 1].append((a * PY + b) * PZ + c)
    surf, edge, vert = groups
    counts = np.zeros((3, X, Y, Z), dtype=np.int64)
    csa = np.zeros((X, Y, Z))
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                i = ((x + 1) * PY + (y + 1)) * PZ + z + 1
                me = flat[i]
                s = e = v = 0
                for o in surf:
                    nb = flat[i + o]
                    if nb is not None and nb != me:
                        s += 1
                for o in edge:
                    nb = flat[i + o]
                    if nb is not None and nb != me:
                        e += 1
                for o in vert:
                    nb = flat[i + o]
                    if nb is not None and nb != me:
                        v += 1
                counts[0, x, y, z] = s
                counts[1, x, y, z] = e
                counts[2, x, y, z] = v
                csa[x, y, z] = params.alpha * (s + params.w_e * e + params.w_v * v) + params.beta
    return {"s_surface": counts[0], "s_edge": counts[1], "s_vertex": counts[2], "s_csa": csa}


def oracle_topk(values: Sequence[float], k: int) -> list[int]:
    """Full sort by (value descending, index ascending), then the first ``k``."""
    vals = [float(v) for v in values]
    if k > len(vals):
        raise ValueError("k exceeds the number of values")
    return sorted(range(len(vals)), key=lambda i: (-vals[i], i))[:k]


def oracle_grad(loss: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences, one coordinate at a time."""
    x = np.array(point, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss(x)
        flat[i] = orig - h
        fm = loss(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def oracle_tally(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore=None) -> dict:
    """Per-voxel confusion tally with IoU/mIoU computed from the raw counts."""
    p_list = np.asarray(pred).ravel().tolist()
    g_list = np.asarray(gt).ravel().tolist()
    ign = [False] * len(p_list) if ignore is None else np.asarray(ignore, dtype=bool).ravel().tolist()
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    otp = ofp = ofn = 0
    for p, g, skip in zip(p_list, g_list, ign):
        if skip:
            continue
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
        if p != 0 and g != 0:
            otp += 1
        elif p != 0:
            ofp += 1
        elif g != 0:
            ofn += 1
    per = []
    for c in range(1, num_classes):
        den = tp[c] + fp[c] + fn[c]
        per.append(tp[c] / den if den else 0.0)
    den = otp + ofp + ofn
    return {"tp": tp, "fp": fp, "fn": fn, "occ": (otp, ofp, ofn),
            "iou": otp / den if den else 0.0, "per_class": per,
            "miou": math.fsum(per) / len(per) if per else 0.0}


def voxelize_points(points: np.ndarray, geom: GridGeometry) -> np.ndarray:
    """Integer voxel coordinates containing each point (may fall outside the grid)."""
    pts = np.asarray(points, dtype=float)
    return np.floor((pts - np.asarray(geom.origin)) / geom.voxel_size).astype(np.int64)
