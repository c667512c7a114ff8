"""Run configuration with strict key checking and the stock training defaults."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .csa import CsaParams, SemanticGroups, identity_groups, semantic_kitti_groups
from .grid import GridDims, ResolutionPair


class ConfigError(ValueError):
    pass


_CSA_KEYS = {"w_e", "w_v", "alpha", "beta", "border_policy"}


@dataclass
class RunConfig:
    csa: CsaParams = field(default_factory=CsaParams)
    groups: str = "C2"
    theta: float = 0.5
    k: int = 4096
    gamma: float = 1.0
    high: tuple[int, int, int] = (128, 128, 16)
    low: tuple[int, int, int] = (64, 64, 8)
    fuse_mode: str = "sequential"
    pairing: str = "correspond"
    csa_resample: str = "max"
    zero_division: str = "zero"
    num_classes: int = 20
    ranges: tuple[float, ...] = (12.8, 25.6, 51.2)
    class_mapping: Optional[str] = None
    image_size: tuple[int, int] = (1220, 370)
    downscale: float = 16.0
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.theta <= 1:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k}")
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        choices = {
            "fuse_mode": ("sequential", "simultaneous"),
            "pairing": ("correspond", "independent"),
            "csa_resample": ("max", "mean"),
            "zero_division": ("zero", "skip"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        try:
            self.pair
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def pair(self) -> ResolutionPair:
        return ResolutionPair(GridDims.of(self.high), GridDims.of(self.low))

    def semantic_groups(self, base: Optional[Path] = None) -> SemanticGroups:
        if self.groups in ("C0", "C1", "C2"):
            if self.num_classes != 20:
                raise ConfigError(f"grouping {self.groups} is defined for the 20 SemanticKITTI classes")
            return semantic_kitti_groups(self.groups)
        if self.groups == "C3":
            return identity_groups(self.num_classes)
        path = Path(self.groups)
        if base is not None and not path.is_absolute():
            path = base / path
        return SemanticGroups.load(path)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = dict(doc)
        if "csa" in kw:
            bad = sorted(set(kw["csa"]) - _CSA_KEYS)
            if bad:
                raise ConfigError(f"unknown csa keys: {', '.join(bad)}")
            try:
                kw["csa"] = CsaParams(**kw["csa"])
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        for key in ("high", "low", "image_size", "ranges"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)
