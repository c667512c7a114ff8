"""Voxel-grid supervision toolkit for multi-resolution semantic scene completion."""

from .camera import CameraRig, DepthMap
from .cda import CriticalSet, ObjectiveWeights, circulated_loss, select_critical, total_objective
from .csa import AnisotropyMap, CsaParams, LossReport, SemanticGroups, csa_cross_entropy, cubic_anisotropy
from .grid import ClassTable, GridDims, GridGeometry, LabelGrid, ResolutionPair
from .lift import FeatureGrid, FeatureMap2D, ScoreGrid, SeedSet

__version__ = "0.1.0"

__all__ = [
    "AnisotropyMap", "CameraRig", "ClassTable", "CriticalSet", "CsaParams", "DepthMap",
    "FeatureGrid", "FeatureMap2D", "GridDims", "GridGeometry", "LabelGrid", "LossReport",
    "ObjectiveWeights", "ResolutionPair", "ScoreGrid", "SeedSet", "SemanticGroups",
    "circulated_loss", "csa_cross_entropy", "cubic_anisotropy", "select_critical",
    "total_objective",
]
