"""Semantic reassignment, cubic semantic anisotropy and the anisotropy-weighted cross-entropy."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .grid import Adjacency, GridError, GridGeometry, LabelGrid, NEIGHBORHOOD26
from .lift import FeatureGrid


class MappingError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


# SemanticKITTI training ids, see grid.SEMANTIC_KITTI_CLASSES
_VEHICLE = (1, 2, 3, 4, 5)
_HUMAN = (6, 7, 8)
_GROUND = (9, 10, 11, 12, 17)
_BUILDING = (13,)
_INFRASTRUCTURE = (14, 18, 19)
_PLANT = (15, 16)


@dataclass(frozen=True)
class SemanticGroups:
    """Total map from class id to group id; class 0 (empty) always maps to group 0."""

    name: str
    mapping: tuple[int, ...]
    group_names: tuple[str, ...] = ()

    def __post_init__(self):
        m = tuple(int(g) for g in self.mapping)
        object.__setattr__(self, "mapping", m)
        if not m or m[0] != 0:
            raise MappingError("class 0 (empty) must map to group 0")
        used = sorted(set(m))
        if used != list(range(len(used))):
            raise MappingError(f"group ids must be contiguous from 0, got {used}")
        if self.group_names and len(self.group_names) != len(used):
            raise MappingError("one name per group is required")

    @property
    def group_count(self) -> int:
        return max(self.mapping) + 1

    @classmethod
    def from_groups(cls, name: str, class_count: int, groups: Mapping[str, tuple[int, ...]]):
        mapping = [None] * class_count
        mapping[0] = 0
        names = ["empty"]
        for gid, (gname, members) in enumerate(groups.items(), start=1):
            names.append(gname)
            for c in members:
                if mapping[c] is not None:
                    raise MappingError(f"class {c} assigned to more than one group")
                mapping[c] = gid
        missing = [c for c, g in enumerate(mapping) if g is None]
        if missing:
            raise MappingError(f"classes {missing} are not assigned to any group")
        return cls(name, tuple(mapping), tuple(names))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SemanticGroups":
        """Load ``{"name": ..., "class_count": N, "groups": {"vehicle": [1, 2], ...}}``."""
        doc = json.loads(Path(path).read_text())
        groups = {k: tuple(v) for k, v in doc["groups"].items()}
        return cls.from_groups(doc.get("name", "custom"), int(doc["class_count"]), groups)


def semantic_kitti_groups(name: str) -> SemanticGroups:
    """The four grouping configurations C0..C3 over the 20 SemanticKITTI classes."""
    if name == "C0":
        return SemanticGroups("C0", (0,) + (1,) * 19, ("empty", "occupied"))
    if name == "C1":
        return SemanticGroups.from_groups("C1", 20, {
            "foreground": _VEHICLE + _HUMAN,
            "background": _GROUND + _BUILDING + _INFRASTRUCTURE + _PLANT,
        })
    if name == "C2":
        return SemanticGroups.from_groups("C2", 20, {
            "vehicle": _VEHICLE, "human": _HUMAN, "ground": _GROUND,
            "building": _BUILDING, "infrastructure": _INFRASTRUCTURE, "plant": _PLANT,
        })
    if name == "C3":
        return SemanticGroups("C3", tuple(range(20)))
    raise MappingError(f"unknown grouping {name!r}; expected C0, C1, C2 or C3")


def identity_groups(class_count: int) -> SemanticGroups:
    return SemanticGroups("C3", tuple(range(class_count)))


@dataclass(frozen=True)
class CsaParams:
    w_e: float = 0.1
    w_v: float = 0.3
    alpha: float = 1.0
    beta: float = 0.5
    border_policy: str = "skip"

    def __post_init__(self):
        if self.w_e < 0 or self.w_v < 0:
            raise ValueError("w_e and w_v must be nonnegative")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.border_policy not in ("skip", "pad-empty"):
            raise ValueError(f"border_policy must be 'skip' or 'pad-empty', got {self.border_policy!r}")

    @property
    def max_weight(self) -> float:
        return self.alpha * (6 + 12 * self.w_e + 8 * self.w_v) + self.beta


@dataclass(frozen=True, eq=False)
class AnisotropyMap:
    geometry: GridGeometry
    s_surface: np.ndarray
    s_edge: np.ndarray
    s_vertex: np.ndarray
    s_csa: np.ndarray

    def counts(self) -> np.ndarray:
        """``(X, Y, Z, 3)`` stack of surface/edge/vertex difference counts."""
        return np.stack([self.s_surface, self.s_edge, self.s_vertex], axis=-1)

    @classmethod
    def from_counts(cls, geometry, s_surface, s_edge, s_vertex, params: CsaParams) -> "AnisotropyMap":
        s_surface, s_edge, s_vertex = (np.asarray(a, dtype=np.int64) for a in (s_surface, s_edge, s_vertex))
        s_csa = params.alpha * (s_surface + params.w_e * s_edge + params.w_v * s_vertex) + params.beta
        return cls(geometry, s_surface, s_edge, s_vertex, s_csa)


@dataclass(frozen=True, eq=False)
class LossReport:
    """A scalar loss and its gradient.

    ``gradient`` is one array shaped like the scored input, or a tuple of
    arrays when the loss has several inputs.
    """

    value: float
    gradient: Union[np.ndarray, tuple]


def reassign(labels: LabelGrid, groups: SemanticGroups) -> LabelGrid:
    lut = np.asarray(groups.mapping, dtype=np.uint16)
    if labels.labels.size and int(labels.labels.max()) >= lut.size:
        bad = sorted(set(np.unique(labels.labels[labels.labels >= lut.size]).tolist()))
        raise MappingError(f"class ids {bad} are not covered by grouping {groups.name}")
    return LabelGrid(labels.geometry, lut[labels.labels], labels.invalid_mask)


def cubic_anisotropy(v_re: LabelGrid, params: CsaParams = CsaParams()) -> AnisotropyMap:
    """Count neighbors with a different group id, split by surface/edge/vertex adjacency."""
    lab = v_re.labels.astype(np.int32)
    pad_value = -1 if params.border_policy == "skip" else 0
    padded = np.pad(lab, 1, constant_values=pad_value)
    X, Y, Z = lab.shape
    counts = {a: np.zeros(lab.shape, dtype=np.int64) for a in Adjacency}
    for (dx, dy, dz), adj in NEIGHBORHOOD26:
        nb = padded[1 + dx:1 + dx + X, 1 + dy:1 + dy + Y, 1 + dz:1 + dz + Z]
        # pad value -1 never equals a real id and is excluded; 0 acts as empty
        counts[adj] += (nb != lab) & (nb >= 0)
    return AnisotropyMap.from_counts(v_re.geometry, counts[Adjacency.SURFACE],
                                     counts[Adjacency.EDGE], counts[Adjacency.VERTEX], params)


def log_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    m = scores.max(axis=axis, keepdims=True)
    shifted = scores - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def csa_cross_entropy(scores: FeatureGrid, labels: LabelGrid, csa: Optional[AnisotropyMap] = None,
                      mask: Optional[np.ndarray] = None, weights: Optional[np.ndarray] = None) -> LossReport:
    """Anisotropy-weighted softmax cross-entropy over the masked voxels.

    The per-voxel weight comes from ``csa.s_csa``, or from ``weights`` when a
    pre-resampled weight grid is supplied; with neither it is 1. Voxels in
    ``labels.invalid_mask`` are always excluded. The result is averaged over
    the evaluated voxel count and its gradient is taken with respect to the
    raw scores.
    """
    shape = labels.dims.shape
    if scores.geometry.dims != labels.dims:
        raise GridError(f"scores {scores.geometry.dims.shape} and labels {shape} differ")
    C = scores.channels
    if labels.labels.size and int(labels.labels.max()) >= C:
        raise GridError(f"label {int(labels.labels.max())} has no score channel (C = {C})")
    if csa is not None and weights is not None:
        raise ValueError("pass either csa or weights, not both")
    if csa is not None:
        if csa.s_csa.shape != shape:
            raise GridError("anisotropy map does not match the label grid")
        weights = csa.s_csa
    w = np.ones(shape) if weights is None else np.asarray(weights, dtype=float).reshape(shape)

    sel = labels.valid()
    if mask is not None:
        sel = sel & np.asarray(mask, dtype=bool).reshape(shape)
    n_v = int(sel.sum())
    if n_v == 0:
        raise DegenerateInputError("no voxels selected for the loss")

    z = scores.values[sel]
    y = labels.labels[sel].astype(np.int64)
    ws = w[sel]
    logp = log_softmax(z)
    rows = np.arange(n_v)
    value = -float(np.sum(ws * logp[rows, y])) / n_v

    g = np.exp(logp)
    g[rows, y] -= 1.0
    g *= (ws / n_v)[:, None]
    grad = np.zeros_like(scores.values)
    grad[sel] = g
    return LossReport(value, grad)
