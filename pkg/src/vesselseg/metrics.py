"""Overlap metrics, HD95 and the per-case metrics report."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .tensor import ShapeError

CSV_HEADER = "case_id,dice,iou,precision,recall,hd95_mm"


@dataclass(frozen=True)
class Overlap:
    dice: float
    iou: float
    precision: float
    recall: float
    empty: frozenset = frozenset()


def _pct(num: int, den: int, scale: float, name: str, empty: set) -> float:
    if den == 0:
        empty.add(name)
        return 100.0
    return scale * num / den


def overlap_metrics(pred: np.ndarray, gt: np.ndarray) -> Overlap:
    """Dice, IoU, precision and recall in percent; 0/0 reports 100 and is flagged."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}", dim="mask")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    empty: set = set()
    return Overlap(
        dice=_pct(2 * tp, 2 * tp + fp + fn, 100.0, "dice", empty),
        iou=_pct(tp, tp + fp + fn, 100.0, "iou", empty),
        precision=_pct(tp, tp + fp, 100.0, "precision", empty),
        recall=_pct(tp, tp + fn, 100.0, "recall", empty),
        empty=frozenset(empty),
    )


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices ``[n, 3]`` of foreground voxels with a 6-neighbour outside the mask."""
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=axis)[core]
    return np.argwhere(m & ~interior)


def directed_distances(src: np.ndarray, dst: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Distance in mm from each voxel of ``src`` to its nearest voxel of ``dst``."""
    sp = np.asarray(spacing, dtype=np.float64)
    d, _ = cKDTree(dst * sp).query(src * sp, k=1)
    return np.asarray(d, dtype=np.float64)


def hd95(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float | None:
    """95th-percentile symmetric Hausdorff distance in mm; ``None`` if either mask is empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}", dim="mask")
    if not pred.any() or not gt.any():
        return None
    a, b = boundary_voxels(pred), boundary_voxels(gt)
    d_ab = np.percentile(directed_distances(a, b, spacing), 95)
    d_ba = np.percentile(directed_distances(b, a, spacing), 95)
    return float(max(d_ab, d_ba))


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    iou: float
    precision: float
    recall: float
    hd95_mm: float | None


def evaluate_case(case_id: str, pred: np.ndarray, gt: np.ndarray, spacing) -> CaseMetrics:
    ov = overlap_metrics(pred, gt)
    return CaseMetrics(case_id, ov.dice, ov.iou, ov.precision, ov.recall, hd95(pred, gt, spacing))


COLUMNS = ("dice", "iou", "precision", "recall", "hd95_mm")


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class MetricsReport:
    rows: list[CaseMetrics] = field(default_factory=list)

    def add(self, row: CaseMetrics) -> None:
        self.rows.append(row)

    def column(self, name: str) -> list[float]:
        vals = [getattr(r, name) for r in self.rows]
        return [v for v in vals if v is not None]

    def mean(self, name: str) -> float | None:
        return _mean_std(self.column(name))[0]

    def std(self, name: str) -> float | None:
        return _mean_std(self.column(name))[1]

    @property
    def hd95_defined(self) -> int:
        return sum(r.hd95_mm is not None for r in self.rows)

    def to_csv(self) -> str:
        def fmt(v):
            return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"

        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.rows:
            buf.write(",".join([r.case_id] + [fmt(getattr(r, c)) for c in COLUMNS]) + "\n")
        buf.write(",".join(["mean"] + [fmt(self.mean(c)) for c in COLUMNS]) + "\n")
        buf.write(",".join(["std"] + [fmt(self.std(c)) for c in COLUMNS]) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())
