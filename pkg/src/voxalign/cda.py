"""Critical voxel selection, the circulated symmetric-KL loss, and the total objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .csa import AnisotropyMap, LossReport, softmax
from .grid import GridDims, GridError, ResolutionPair, blocks
from .lift import FeatureGrid, ScoreGrid

EPS = 1e-12


class DomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CriticalSet:
    resolution: GridDims
    indices: np.ndarray
    ranking_score: np.ndarray
    distributions: Optional[np.ndarray] = None
    low_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "resolution", GridDims.of(self.resolution))
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        if np.unique(idx).size != idx.size:
            raise GridError("critical indices must be distinct")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "ranking_score", np.asarray(self.ranking_score, dtype=float).ravel())
        if self.distributions is not None:
            d = np.asarray(self.distributions, dtype=float)
            if d.shape[0] != idx.size or d.min(initial=0) < 0 or np.abs(d.sum(axis=1) - 1).max(initial=0) > 1e-9:
                raise GridError("distributions must be one normalized row per index")
            object.__setattr__(self, "distributions", d)

    @property
    def k(self) -> int:
        return self.indices.size


def occupancy_confidence(scores: FeatureGrid) -> ScoreGrid:
    """Highest softmax probability per voxel, in ``[1/N, 1]``."""
    if scores.channels < 2:
        raise GridError("occupancy confidence needs at least two class channels")
    return ScoreGrid(scores.geometry, softmax(scores.values).max(axis=-1))


def csa_to_resolution(csa: AnisotropyMap | np.ndarray, target, mode: str = "max") -> np.ndarray:
    """Resample anisotropy weights onto a coarser grid by block max (or mean)."""
    src = csa.s_csa if isinstance(csa, AnisotropyMap) else np.asarray(csa, dtype=float)
    target = GridDims.of(target)
    f = src.shape[0] // target.x
    if f < 1 or tuple(n * f for n in target.shape) != src.shape:
        raise GridError(f"{src.shape} is not an integer multiple of {target.shape}")
    if f == 1:
        return src.astype(float, copy=True)
    b = blocks(src, f)
    if mode == "max":
        return b.max(axis=3)
    if mode == "mean":
        return b.mean(axis=3)
    raise ValueError(f"unknown resampling mode {mode!r}")


def top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, ranked descending, ties to the smaller index."""
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if not 0 < k <= n:
        raise GridError(f"k = {k} outside [1, {n}]")
    if np.isnan(v).any():
        raise DomainError("ranking values contain NaN")
    kth = np.partition(v, n - k)[n - k]
    above = np.flatnonzero(v > kth)
    ties = np.flatnonzero(v == kth)[: k - above.size]
    chosen = np.concatenate([above, ties])
    # ascending-index order before a stable sort keeps the tie rule intact
    chosen.sort()
    return chosen[np.argsort(-v[chosen], kind="stable")]


def select_critical(conf: ScoreGrid, csa_at_res: np.ndarray, k: int) -> CriticalSet:
    csa_at_res = np.asarray(csa_at_res, dtype=float)
    if csa_at_res.shape != conf.scores.shape:
        raise GridError(f"confidence {conf.scores.shape} and anisotropy {csa_at_res.shape} differ")
    prod = (conf.scores * csa_at_res).ravel()
    if k > prod.size:
        raise GridError(f"k = {k} exceeds the {prod.size} available voxels")
    idx = top_k(prod, k)
    return CriticalSet(conf.geometry.dims, idx, prod[idx])


def pair_across_resolutions(high_indices, pair: ResolutionPair) -> np.ndarray:
    """Map high-resolution linear indices to the low-resolution voxels containing them."""
    idx = np.asarray(high_indices, dtype=np.int64)
    x, y, z = np.unravel_index(idx, pair.high.shape)
    lam = pair.ratio
    return np.ravel_multi_index((x // lam, y // lam, z // lam), pair.low.shape).astype(np.int64)


def voxel_distributions(scores: FeatureGrid, indices) -> np.ndarray:
    return softmax(scores.flat[np.asarray(indices, dtype=np.int64)])


def critical_pairs(conf_high: ScoreGrid, csa_high: np.ndarray, k: int, pair: ResolutionPair,
                   mode: str = "correspond", conf_low: Optional[ScoreGrid] = None,
                   csa_low: Optional[np.ndarray] = None) -> tuple[CriticalSet, np.ndarray]:
    """Select critical voxels and the low-resolution rows they are compared against.

    ``correspond`` pairs each high-resolution pick with the low voxel covering
    it; ``independent`` runs a separate top-k at the low level and pairs rows
    by rank.
    """
    crit = select_critical(conf_high, csa_high, k)
    if mode == "correspond":
        low = pair_across_resolutions(crit.indices, pair)
    elif mode == "independent":
        if conf_low is None or csa_low is None:
            raise ValueError("independent selection needs low-resolution confidence and anisotropy")
        low = select_critical(conf_low, csa_low, k).indices
    else:
        raise ValueError(f"unknown pairing mode {mode!r}")
    return CriticalSet(crit.resolution, crit.indices, crit.ranking_score, low_indices=low), low


def circulated_loss(P1: np.ndarray, P2: np.ndarray) -> LossReport:
    """Row-averaged symmetric KL divergence ``KL(p1||p2) + KL(p2||p1)``.

    Probabilities are clamped to ``EPS`` before taking logs; the gradient is
    with respect to the clamped values.
    """
    P1 = np.asarray(P1, dtype=float)
    P2 = np.asarray(P2, dtype=float)
    if P1.shape != P2.shape or P1.ndim != 2:
        raise GridError(f"shape mismatch: {P1.shape} vs {P2.shape}")
    if (P1 < 0).any() or (P2 < 0).any():
        raise DomainError("probabilities must be nonnegative")
    k = P1.shape[0]
    if k == 0:
        return LossReport(0.0, (np.zeros_like(P1), np.zeros_like(P2)))
    q1 = np.maximum(P1, EPS)
    q2 = np.maximum(P2, EPS)
    dlog = np.log(q1) - np.log(q2)
    value = float(np.sum((q1 - q2) * dlog)) / k
    g1 = (dlog + 1.0 - q2 / q1) / k
    g2 = (-dlog + 1.0 - q1 / q2) / k
    return LossReport(value, (g1, g2))


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient on softmax outputs back to the logits (row-wise)."""
    return probs * (grad_probs - np.sum(probs * grad_probs, axis=-1, keepdims=True))


def circulated_score_loss(high: FeatureGrid, low: FeatureGrid, high_indices, low_indices) -> LossReport:
    """Circulated loss over paired voxels with gradients scattered back onto both score grids."""
    hi = np.asarray(high_indices, dtype=np.int64)
    lo = np.asarray(low_indices, dtype=np.int64)
    p1 = voxel_distributions(high, hi)
    p2 = voxel_distributions(low, lo)
    rep = circulated_loss(p1, p2)
    g_hi = np.zeros_like(high.flat)
    g_lo = np.zeros_like(low.flat)
    np.add.at(g_hi, hi, softmax_backward(p1, rep.gradient[0]))
    # several high picks may share one low voxel
    np.add.at(g_lo, lo, softmax_backward(p2, rep.gradient[1]))
    return LossReport(rep.value, (g_hi.reshape(high.values.shape), g_lo.reshape(low.values.shape)))


PLUGIN_TERMS = ("lovasz", "scal")


@dataclass
class ObjectiveWeights:
    """``gamma`` weights the circulated loss; ``toggles[level][term]`` enables per-level terms.

    Missing toggles default to on for ``csa_ce`` and off for the plug-in slots.
    """

    gamma: float = 1.0
    toggles: Sequence[Mapping[str, bool]] = field(default_factory=list)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    def enabled(self, level: int, term: str) -> bool:
        if level < len(self.toggles) and term in self.toggles[level]:
            return bool(self.toggles[level][term])
        return term not in PLUGIN_TERMS


def total_objective(terms: Sequence[Mapping[str, LossReport]], weights: ObjectiveWeights,
                    circ: Optional[LossReport] = None) -> LossReport:
    """Sum per-level occupancy terms and add ``gamma`` times the circulated loss.

    ``terms[i]`` maps term names (``csa_ce``, ``lovasz``, ``scal``) to reports
    whose gradients share level ``i``'s score shape, or to zero-argument
    callables producing one; callables are only invoked when the term is on. ``circ.gradient`` holds one
    score-space array per level. Returns one gradient per level; a level with
    every term off gets zeros, or ``None`` if its shape cannot be inferred.
    """
    value = 0.0
    grads = []
    for level, level_terms in enumerate(terms):
        g = None
        for name, rep in level_terms.items():
            if not weights.enabled(level, name):
                continue
            if callable(rep):
                rep = rep()
            value += rep.value
            g = np.array(rep.gradient, dtype=float) if g is None else g + rep.gradient
        if g is None:
            shaped = [r for r in level_terms.values() if not callable(r)]
            g = np.zeros_like(np.asarray(shaped[0].gradient, dtype=float)) if shaped else None
        grads.append(g)
    if circ is not None and weights.gamma != 0:
        value += weights.gamma * circ.value
        for level, cg in enumerate(circ.gradient):
            if level >= len(grads):
                grads.append(None)
            scaled = weights.gamma * np.asarray(cg)
            grads[level] = scaled if grads[level] is None else grads[level] + scaled
    return LossReport(value, tuple(grads))

