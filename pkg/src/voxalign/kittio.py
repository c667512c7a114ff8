"""SemanticKITTI voxel files, KITTI calibration, and the VXAL grid container.

VXAL layout (all little-endian)::

    magic     4s   b"VXAL"
    version   u16  1
    kind      u8   1 labels | 2 scores | 3 features | 4 anisotropy
    dims      3xu32
    channels  u32
    elem      u8   1 u16 | 2 f32 | 3 f64 | 4 u8-bool
    payload        X*Y*Z*channels elements, x-major, channel fastest
    crc32     u32  IEEE CRC-32 of header + payload
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .camera import CameraError, CameraRig
from .cda import CriticalSet
from .csa import AnisotropyMap, CsaParams, MappingError
from .grid import (SEMANTIC_KITTI_DIMS, ClassTable, GridDims, GridError, GridGeometry,
                   LabelGrid)
from .lift import FeatureGrid

PathLike = Union[str, Path]


class FormatError(ValueError):
    pass


class ParseError(ValueError):
    pass


# ---------------------------------------------------------------- SemanticKITTI


def _expected_dims(dims) -> GridDims:
    return GridDims.of(dims if dims is not None else SEMANTIC_KITTI_DIMS)


def unpack_bits(data: bytes, dims=None) -> np.ndarray:
    """Decode MSB-first bit-packed voxel flags (the .bin / .invalid layout)."""
    d = _expected_dims(dims)
    n_bytes = (d.count + 7) // 8
    if len(data) != n_bytes:
        raise FormatError(f"expected {n_bytes} bytes for {d.shape} bit-packed voxels, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")[: d.count]
    return bits.astype(bool).reshape(d.shape)


def pack_bits(mask: np.ndarray) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool).ravel(), bitorder="big").tobytes()


def read_occupancy_bin(data: bytes, dims=None, geometry: Optional[GridGeometry] = None) -> LabelGrid:
    """Occupancy grid with label 1 for occupied voxels and 0 for empty ones."""
    d = _expected_dims(dims)
    occ = unpack_bits(data, d)
    return LabelGrid(geometry or GridGeometry.semantic_kitti(d), occ.astype(np.uint16))


def write_occupancy_bin(grid: LabelGrid) -> bytes:
    return pack_bits(grid.labels != 0)


def read_invalid(data: bytes, dims=None) -> np.ndarray:
    return unpack_bits(data, dims)


def write_invalid(mask: np.ndarray) -> bytes:
    return pack_bits(mask)


@dataclass(frozen=True)
class ClassMapping:
    """Raw dataset ids to contiguous training ids, plus class names."""

    raw_to_train: Mapping[int, int]
    names: tuple[str, ...]
    train_to_raw: Optional[Mapping[int, int]] = None

    @classmethod
    def from_json(cls, doc: Union[str, dict]) -> "ClassMapping":
        if isinstance(doc, str):
            doc = json.loads(doc)
        fwd = {int(k): int(v) for k, v in doc["map"].items()}
        inv = {int(k): int(v) for k, v in doc["inverse"].items()} if "inverse" in doc else None
        return cls(fwd, tuple(doc["names"]), inv)

    @classmethod
    def load(cls, path: PathLike) -> "ClassMapping":
        return cls.from_json(Path(path).read_text())

    @classmethod
    def semantic_kitti(cls) -> "ClassMapping":
        text = resources.files("voxalign").joinpath("data/semantic_kitti.json").read_text()
        return cls.from_json(text)

    @property
    def table(self) -> ClassTable:
        return ClassTable(self.names)

    def forward_lut(self) -> np.ndarray:
        lut = np.full(65536, -1, dtype=np.int32)
        for raw, train in self.raw_to_train.items():
            lut[raw] = train
        return lut

    def inverse_lut(self) -> np.ndarray:
        inv = dict(self.train_to_raw or {})
        for raw, train in sorted(self.raw_to_train.items()):
            inv.setdefault(train, raw)
        lut = np.full(max(inv) + 1, -1, dtype=np.int32)
        for train, raw in inv.items():
            lut[train] = raw
        return lut


def read_labels(data: bytes, mapping: Optional[ClassMapping] = None, dims=None,
                geometry: Optional[GridGeometry] = None, invalid: Optional[np.ndarray] = None) -> LabelGrid:
    """Decode u16 little-endian raw ids; remap to training ids when ``mapping`` is given."""
    d = _expected_dims(dims)
    if len(data) != d.count * 2:
        raise FormatError(f"expected {d.count * 2} bytes of u16 labels, got {len(data)}")
    raw = np.frombuffer(data, dtype="<u2").reshape(d.shape)
    if mapping is not None:
        mapped = mapping.forward_lut()[raw]
        if (mapped < 0).any():
            bad = int(raw[mapped < 0].ravel()[0])
            raise MappingError(f"raw label id {bad} is not in the class mapping")
        raw = mapped
    return LabelGrid(geometry or GridGeometry.semantic_kitti(d), raw, invalid)


def write_labels(grid: LabelGrid, mapping: Optional[ClassMapping] = None) -> bytes:
    """Encode labels as u16 little-endian; with ``mapping`` training ids go back to raw ids."""
    lab = grid.labels.astype(np.int64)
    if mapping is not None:
        lut = mapping.inverse_lut()
        if lab.size and lab.max() >= lut.size:
            raise MappingError(f"training id {int(lab.max())} has no raw id")
        lab = lut[lab]
        if (lab < 0).any():
            raise MappingError("some training ids have no raw id")
    return lab.astype("<u2").tobytes()


@dataclass(frozen=True)
class VoxelFileBundle:
    """One SemanticKITTI frame: ``<seq>/voxels/<frame>.bin|.label|.invalid``."""

    occupancy: Optional[Path] = None
    label: Optional[Path] = None
    invalid: Optional[Path] = None

    def __post_init__(self):
        if self.occupancy is None and self.label is None and self.invalid is None:
            raise FormatError("a voxel bundle needs at least one file")

    @classmethod
    def for_frame(cls, voxels_dir: PathLike, frame: str) -> "VoxelFileBundle":
        base = Path(voxels_dir)
        found = {ext: base / f"{frame}.{ext}" for ext in ("bin", "label", "invalid")}
        found = {k: (p if p.exists() else None) for k, p in found.items()}
        return cls(found["bin"], found["label"], found["invalid"])

    def load(self, mapping: Optional[ClassMapping] = None, dims=None) -> LabelGrid:
        d = _expected_dims(dims)
        invalid = read_invalid(self.invalid.read_bytes(), d) if self.invalid else None
        if self.label is not None:
            return read_labels(self.label.read_bytes(), mapping, d, invalid=invalid)
        if self.occupancy is not None:
            occ = read_occupancy_bin(self.occupancy.read_bytes(), d)
            return LabelGrid(occ.geometry, occ.labels, invalid)
        return LabelGrid(GridGeometry.semantic_kitti(d), np.zeros(d.shape), invalid)


# ---------------------------------------------------------------- calibration


def parse_calibration(text: str) -> dict[str, np.ndarray]:
    """All ``KEY: v1 ... vn`` rows of a KITTI calib file."""
    rows = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise ParseError(f"line {lineno}: missing ':' separator")
        try:
            rows[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    return rows


def read_calibration(text: str, image_size=(1220, 370), tol: float = 1e-6) -> CameraRig:
    """Build a camera rig from the ``P2`` and ``Tr`` rows.

    ``K`` is the left 3x3 block of ``P2``; the fourth column of ``P2`` (the
    offset of camera 2 from the rectified reference camera) is folded into
    the translation, so a ``P2`` of ``[K | 0]`` leaves ``Tr`` untouched.
    """
    rows = parse_calibration(text)
    for key in ("P2", "Tr"):
        if key not in rows:
            raise ParseError(f"calibration has no {key}: row")
        if rows[key].size != 12:
            raise ParseError(f"{key}: expected 12 values, got {rows[key].size}")
    P2 = rows["P2"].reshape(3, 4)
    Tr = rows["Tr"].reshape(3, 4)
    K = P2[:, :3]
    R = Tr[:, :3]
    try:
        offset = np.linalg.solve(K, P2[:, 3])
    except np.linalg.LinAlgError as exc:
        raise ParseError("P2 has a singular left 3x3 block") from exc
    try:
        return CameraRig(K, R, Tr[:, 3] + offset, image_size, tol=tol)
    except CameraError as exc:
        raise CameraError(f"calibration rejected: {exc}") from exc


def format_calibration(rig: CameraRig) -> str:
    """Calibration text with ``P2 = [K | 0]`` and ``Tr = [R | t]``."""
    P2 = np.hstack([rig.K, np.zeros((3, 1))])
    Tr = np.hstack([rig.R, rig.t[:, None]])
    fmt = lambda m: " ".join(f"{v:.17g}" for v in m.ravel())
    return f"P2: {fmt(P2)}\nTr: {fmt(Tr)}\n"


# ---------------------------------------------------------------- VXAL container

MAGIC = b"VXAL"
VERSION = 1
KINDS = {"labels": 1, "scores": 2, "features": 3, "anisotropy": 4}
ELEM_TYPES = {1: np.dtype("<u2"), 2: np.dtype("<f4"), 3: np.dtype("<f8"), 4: np.dtype("u1")}
_ELEM_BY_NAME = {"u16": 1, "f32": 2, "f64": 3, "bool": 4}
_HEADER = struct.Struct("<4sHB3IIB")


@dataclass(frozen=True, eq=False)
class GridContainer:
    kind: str
    dims: GridDims
    data: np.ndarray  # (X, Y, Z, C)

    @property
    def channels(self) -> int:
        return self.data.shape[3]


def _elem_code(arr: np.ndarray) -> int:
    if arr.dtype == bool:
        return 4
    for code, dt in ELEM_TYPES.items():
        if code != 4 and arr.dtype == dt.newbyteorder("="):
            return code
    raise FormatError(f"unsupported element type {arr.dtype}")


def write_container(kind: str, data: np.ndarray) -> bytes:
    if kind not in KINDS:
        raise FormatError(f"unknown payload kind {kind!r}")
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise FormatError("container payload must be (X, Y, Z) or (X, Y, Z, C)")
    X, Y, Z, C = arr.shape
    if C == 0:
        raise FormatError("container payload has no channels")
    dims = GridDims(X, Y, Z)
    code = _elem_code(arr)
    header = _HEADER.pack(MAGIC, VERSION, KINDS[kind], *dims.shape, C, code)
    payload = np.ascontiguousarray(arr, dtype=ELEM_TYPES[code]).tobytes()
    body = header + payload
    return body + struct.pack("<I", zlib.crc32(body))


def read_container(data: bytes) -> GridContainer:
    if len(data) < _HEADER.size + 4:
        raise FormatError(f"container too short ({len(data)} bytes)")
    magic, version, kind, X, Y, Z, C, code = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    names = {v: k for k, v in KINDS.items()}
    if kind not in names:
        raise FormatError(f"unknown payload kind code {kind}")
    if code not in ELEM_TYPES:
        raise FormatError(f"unknown element type code {code}")
    if C == 0:
        raise FormatError("container declares zero channels")
    try:
        dims = GridDims(X, Y, Z)
    except GridError as exc:
        raise FormatError(f"bad dims in header: {exc}") from exc
    dt = ELEM_TYPES[code]
    n_payload = dims.count * C * dt.itemsize
    if len(data) != _HEADER.size + n_payload + 4:
        raise FormatError(f"payload length mismatch: header implies {n_payload} bytes, "
                          f"file holds {len(data) - _HEADER.size - 4}")
    body = data[: _HEADER.size + n_payload]
    (crc,) = struct.unpack_from("<I", data, _HEADER.size + n_payload)
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch")
    arr = np.frombuffer(body, dtype=dt, offset=_HEADER.size).reshape(X, Y, Z, C)
    if code == 4:
        arr = arr.astype(bool)
    else:
        arr = arr.astype(dt.newbyteorder("="))
    return GridContainer(names[kind], dims, arr)


def encode(obj, elem: str = "f64") -> bytes:
    """Serialize a LabelGrid, FeatureGrid, AnisotropyMap or boolean array.

    Feature grids are written with kind ``features``; use :func:`write_container`
    directly for ``scores``.
    """
    float_t = ELEM_TYPES[_ELEM_BY_NAME[elem]].newbyteorder("=")
    if isinstance(obj, LabelGrid):
        chans = [obj.labels]
        if obj.invalid_mask is not None:
            chans.append(obj.invalid_mask.astype(np.uint16))
        return write_container("labels", np.stack(chans, axis=-1).astype(np.uint16))
    if isinstance(obj, AnisotropyMap):
        stack = np.stack([obj.s_surface, obj.s_edge, obj.s_vertex, obj.s_csa], axis=-1)
        return write_container("anisotropy", stack.astype(np.float64))
    if isinstance(obj, FeatureGrid):
        return write_container("features", obj.values.astype(float_t))
    arr = np.asarray(obj)
    if arr.dtype == bool:
        return write_container("labels", arr)
    raise FormatError(f"cannot encode {type(obj).__name__}")


def decode(data: bytes, geometry: Optional[GridGeometry] = None, params: CsaParams = CsaParams()):
    """Inverse of :func:`encode`; scores and features both come back as FeatureGrid."""
    c = read_container(data)
    geom = geometry or GridGeometry.semantic_kitti(c.dims)
    if geom.dims != c.dims:
        raise FormatError(f"container dims {c.dims.shape} differ from geometry {geom.dims.shape}")
    if c.kind == "labels":
        if c.data.dtype == bool:
            return c.data[..., 0]
        invalid = c.data[..., 1].astype(bool) if c.channels == 2 else None
        return LabelGrid(geom, c.data[..., 0], invalid)
    if c.kind == "anisotropy":
        if c.channels != 4:
            raise FormatError("anisotropy payload needs 4 channels")
        d = c.data
        return AnisotropyMap(geom, d[..., 0].astype(np.int64), d[..., 1].astype(np.int64),
                             d[..., 2].astype(np.int64), d[..., 3].astype(float))
    return FeatureGrid(geom, c.data.astype(float))


def save(path: PathLike, obj, elem: str = "f64") -> None:
    Path(path).write_bytes(encode(obj, elem))


def load(path: PathLike, geometry: Optional[GridGeometry] = None):
    path = Path(path)
    try:
        return decode(path.read_bytes(), geometry)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- critical sets


def save_critical_set(path: PathLike, cs: CriticalSet) -> None:
    """JSON index list; distributions go to a sibling ``.dist.vxal`` container."""
    path = Path(path)
    doc = {
        "resolution": list(cs.resolution.shape),
        "indices": cs.indices.tolist(),
        "ranking_score": cs.ranking_score.tolist(),
        "low_indices": None if cs.low_indices is None else np.asarray(cs.low_indices).tolist(),
        "distributions": None,
    }
    if cs.distributions is not None and cs.k:
        dist_path = path.with_suffix(".dist.vxal")
        dist = cs.distributions.reshape(cs.k, 1, 1, -1)
        dist_path.write_bytes(write_container("features", dist))
        doc["distributions"] = dist_path.name
    path.write_text(json.dumps(doc) + "\n")


def load_critical_set(path: PathLike) -> CriticalSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        dist = None
        if doc.get("distributions"):
            c = read_container((path.parent / doc["distributions"]).read_bytes())
            dist = c.data.reshape(c.dims.x, c.channels)
        return CriticalSet(GridDims.of(doc["resolution"]), doc["indices"], doc["ranking_score"],
                           dist, doc.get("low_indices"))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed critical set ({exc})") from exc
