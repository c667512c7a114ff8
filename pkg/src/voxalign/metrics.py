"""Scene-completion metrics (IoU / mIoU), range restriction and label sparsity statistics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import CameraRig, project_points
from .grid import ClassTable, GridError, GridGeometry, LabelGrid

DEFAULT_RANGES = (12.8, 25.6, 51.2)


@dataclass(frozen=True, eq=False)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    occ_tp: int
    occ_fp: int
    occ_fn: int
    evaluated: int

    @property
    def num_classes(self) -> int:
        return self.tp.size

    def to_dict(self) -> dict:
        return {
            "tp": self.tp.tolist(), "fp": self.fp.tolist(), "fn": self.fn.tolist(),
            "occupancy": {"tp": self.occ_tp, "fp": self.occ_fp, "fn": self.occ_fn},
            "evaluated": self.evaluated,
        }


def confusion(pred: LabelGrid, gt: LabelGrid, ignore: Optional[np.ndarray] = None,
              num_classes: Optional[int] = None) -> ConfusionCounts:
    """Per-class and binary-occupancy tallies over non-ignored voxels.

    Voxels flagged in either grid's invalid mask or in ``ignore`` are skipped.
    """
    if pred.dims != gt.dims:
        raise GridError(f"prediction {pred.dims.shape} and ground truth {gt.dims.shape} differ")
    keep = gt.valid() & pred.valid()
    if ignore is not None:
        keep &= ~np.asarray(ignore, dtype=bool).reshape(gt.dims.shape)
    p = pred.labels[keep].astype(np.int64)
    g = gt.labels[keep].astype(np.int64)
    if num_classes is None:
        num_classes = int(max(p.max(initial=0), g.max(initial=0))) + 1
    n = num_classes
    cm = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    po, go = p != 0, g != 0
    return ConfusionCounts(tp, fp, fn, int(np.sum(po & go)), int(np.sum(po & ~go)),
                           int(np.sum(~po & go)), int(keep.sum()))


@dataclass(frozen=True)
class IoUResult:
    iou: float
    per_class: tuple[float, ...]
    miou: float

    def to_dict(self, names: Optional[Sequence[str]] = None) -> dict:
        per = list(self.per_class)
        if names is not None:
            per = dict(zip(names[1:], per))
        return {"iou": self.iou, "miou": self.miou, "per_class": per}


def _ratio(tp, fp, fn):
    den = tp + fp + fn
    return tp / den if den else None


def iou_miou(c: ConfusionCounts, zero_division: str = "zero") -> IoUResult:
    """Binary IoU, per-class IoU over non-empty classes, and their unweighted mean.

    Classes with an empty denominator score 0 (``zero_division="zero"``) or are
    reported as NaN and left out of the mean (``"skip"``).
    """
    if zero_division not in ("zero", "skip"):
        raise ValueError(f"zero_division must be 'zero' or 'skip', got {zero_division!r}")
    occ = _ratio(c.occ_tp, c.occ_fp, c.occ_fn)
    per = []
    for cls in range(1, c.num_classes):
        r = _ratio(int(c.tp[cls]), int(c.fp[cls]), int(c.fn[cls]))
        per.append(r if r is not None else (0.0 if zero_division == "zero" else float("nan")))
    counted = [v for v in per if not np.isnan(v)]
    # correctly rounded sum, so the mean does not depend on summation order
    miou = math.fsum(counted) / len(counted) if counted else 0.0
    return IoUResult(0.0 if occ is None else float(occ), tuple(float(v) for v in per), miou)


def range_mask(geom: GridGeometry, rig: CameraRig, max_range: float) -> np.ndarray:
    """Voxels whose centroid lies in front of the camera within ``max_range`` along the optical axis."""
    if not max_range > 0:
        raise ValueError("max_range must be positive")
    _, _, z = project_points(geom.centroids(), rig)
    return (z > 0) & (z <= max_range)


def restrict(grid: LabelGrid, mask: np.ndarray) -> LabelGrid:
    """Mark everything outside ``mask`` invalid."""
    inv = ~np.asarray(mask, dtype=bool)
    if grid.invalid_mask is not None:
        inv = inv | grid.invalid_mask
    return LabelGrid(grid.geometry, grid.labels, inv)


def evaluate(pred: LabelGrid, gt: LabelGrid, num_classes: int, ignore=None,
             zero_division: str = "zero") -> IoUResult:
    return iou_miou(confusion(pred, gt, ignore, num_classes), zero_division)


def evaluate_ranges(pred: LabelGrid, gt: LabelGrid, rig: CameraRig, num_classes: int,
                    ranges: Sequence[float] = DEFAULT_RANGES, zero_division: str = "zero") -> dict:
    """Evaluate only in-range voxels of both grids for each distance cutoff."""
    out = {}
    for r in ranges:
        outside = ~range_mask(gt.geometry, rig, r)
        out[float(r)] = evaluate(pred, gt, num_classes, outside, zero_division)
    return out


@dataclass(frozen=True, eq=False)
class SparsityReport:
    counts: np.ndarray
    empty_fraction: float
    valid_total: int

    @property
    def log10_counts(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.counts > 0, np.log10(np.maximum(self.counts, 1)), np.nan)

    def to_dict(self, names: Optional[Sequence[str]] = None) -> dict:
        names = list(names) if names is not None else [str(i) for i in range(self.counts.size)]
        return {
            "valid_voxels": self.valid_total,
            "empty_fraction": self.empty_fraction,
            "counts": {n: int(c) for n, c in zip(names, self.counts)},
        }

    def to_csv(self, names: Optional[Sequence[str]] = None) -> str:
        names = list(names) if names is not None else [str(i) for i in range(self.counts.size)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "name", "count", "log10_count"])
        for i, (n, c, lc) in enumerate(zip(names, self.counts, self.log10_counts)):
            w.writerow([i, n, int(c), "" if np.isnan(lc) else f"{lc:.6g}"])
        return buf.getvalue()


def sparsity_stats(gt: LabelGrid, table: Optional[ClassTable] = None) -> SparsityReport:
    valid = gt.valid()
    n = table.count if table is not None else None
    vals = gt.labels[valid].astype(np.int64)
    counts = np.bincount(vals, minlength=n or 1)
    total = int(valid.sum())
    frac = float(counts[0]) / total if total else 0.0
    return SparsityReport(counts, frac, total)


def format_table(rows: Sequence[Sequence[str]]) -> str:
    """Left-align the first column and right-align the rest."""
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [str(r[0]).ljust(widths[0])] + [str(c).rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False)
