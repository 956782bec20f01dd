"""Per-structure evaluation: Dice, Jaccard, symmetric average surface
distance, Hausdorff distance.

Surfaces are 4-connected 2-d boundaries extracted per slice and scaled by
the in-plane voxel spacing. Distances aggregate slice-wise over a volume:
Hausdorff takes the maximum over slices, average surface distance pools
every boundary point's nearest-neighbor distance across slices. When one
side of a slice has no boundary the in-plane image diagonal acts as a
sentinel distance and the case is flagged rather than dropped. Hausdorff is
the exact directed maximum (no percentile).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MaskVolume
from .errors import DataError

FOREGROUND_CLASSES = (1, 2, 3)
CLASS_NAMES = {1: "LV", 2: "myo", 3: "RV"}


@dataclass
class SurfacePointSet:
    """Boundary voxel coordinates in mm, one array of (y, x) rows per slice."""

    points_per_slice: list[np.ndarray]
    label: int
    source: str  # "prediction" | "reference"
    extent_mm: tuple[float, float]  # in-plane physical size, for the sentinel

    @property
    def total_points(self) -> int:
        return sum(len(p) for p in self.points_per_slice)

    @property
    def diagonal_mm(self) -> float:
        return float(np.hypot(*self.extent_mm))


def dice_score(pred: MaskVolume, ref: MaskVolume, label: int) -> float:
    """2|P&R| / (|P| + |R|); defined as 1.0 when both structures are empty."""
    p, r = _binary(pred, ref, label)
    np_, nr = np.count_nonzero(p), np.count_nonzero(r)
    if np_ + nr == 0:
        return 1.0
    inter = np.count_nonzero(p & r)
    return 2.0 * inter / (np_ + nr)


def jaccard(pred: MaskVolume, ref: MaskVolume, label: int) -> float:
    """Intersection over union; defined as 1.0 when both structures are empty."""
    p, r = _binary(pred, ref, label)
    union = np.count_nonzero(p | r)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & r) / union


def _binary(pred: MaskVolume, ref: MaskVolume, label: int):
    if pred.labels.shape != ref.labels.shape:
        raise DataError(f"extent mismatch: prediction {pred.labels.shape} vs "
                        f"reference {ref.labels.shape}")
    return pred.labels == label, ref.labels == label


def extract_surface(mask: MaskVolume, label: int,
                    source: str = "prediction") -> SurfacePointSet:
    """Per-slice boundary: class pixels with at least one 4-neighbor (or the
    image border) outside the class, scaled to mm."""
    region = mask.labels == label
    _, h, w = region.shape
    sy, sx = mask.spacing[1], mask.spacing[2]
    per_slice = []
    for sl in region:
        inside = np.zeros_like(sl)
        inside[1:-1, 1:-1] = (sl[:-2, 1:-1] & sl[2:, 1:-1]
                              & sl[1:-1, :-2] & sl[1:-1, 2:])
        boundary = sl & ~inside
        ys, xs = np.nonzero(boundary)
        pts = np.column_stack([ys * sy, xs * sx]).astype(np.float64)
        per_slice.append(pts)
    return SurfacePointSet(per_slice, label, source,
                           (h * sy, w * sx))


def _directed_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Nearest-neighbor distance from each point of a to the set b."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)


def hausdorff(a: SurfacePointSet, b: SurfacePointSet) -> float:
    """Symmetric Hausdorff distance in mm, maximum over slices."""
    worst = 0.0
    sentinel = max(a.diagonal_mm, b.diagonal_mm)
    for pa, pb in zip(a.points_per_slice, b.points_per_slice):
        if len(pa) == 0 and len(pb) == 0:
            continue
        if len(pa) == 0 or len(pb) == 0:
            worst = max(worst, sentinel)
            continue
        d_ab = _directed_dists(pa, pb).max()
        d_ba = _directed_dists(pb, pa).max()
        worst = max(worst, d_ab, d_ba)
    return worst


def avg_surface_distance(a: SurfacePointSet, b: SurfacePointSet) -> float:
    """Symmetric average surface distance in mm: the mean nearest-neighbor
    distance pooled over both boundaries and all slices."""
    sentinel = max(a.diagonal_mm, b.diagonal_mm)
    total = 0.0
    count = 0
    for pa, pb in zip(a.points_per_slice, b.points_per_slice):
        if len(pa) == 0 and len(pb) == 0:
            continue
        if len(pa) == 0 or len(pb) == 0:
            n = len(pa) + len(pb)
            total += sentinel * n
            count += n
            continue
        total += _directed_dists(pa, pb).sum() + _directed_dists(pb, pa).sum()
        count += len(pa) + len(pb)
    return total / count if count else 0.0


@dataclass
class MetricsRow:
    patient: str
    label: int
    dice: float
    jaccard: float
    asd_mm: float
    hd_mm: float
    flags: str = ""


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)
    aggregates: list[MetricsRow] = field(default_factory=list)
    spacing_note: str = ""

    def per_class(self, label: int) -> list[MetricsRow]:
        return [r for r in self.rows if r.label == label]

    def aggregate(self, which: str, label: int) -> MetricsRow:
        for r in self.aggregates:
            if r.patient == which and r.label == label:
                return r
        raise KeyError(f"no {which} aggregate for class {label}")

    def mean_foreground_dice(self) -> float:
        return float(np.mean([self.aggregate("mean", c).dice
                              for c in FOREGROUND_CLASSES]))

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["patient", "class", "dice", "jaccard", "asd_mm",
                        "hd_mm", "flags"])
            for r in self.rows + self.aggregates:
                w.writerow([r.patient, r.label, f"{r.dice:.6f}",
                            f"{r.jaccard:.6f}", f"{r.asd_mm:.6f}",
                            f"{r.hd_mm:.6f}", r.flags])

    def to_json(self, path) -> None:
        payload = {
            "spacing_note": self.spacing_note,
            "rows": [vars(r) for r in self.rows],
            "aggregates": [vars(r) for r in self.aggregates],
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, indent=1))


def evaluate(preds: list[MaskVolume], refs: list[MaskVolume]) -> MetricsReport:
    """Per patient x foreground class rows plus mean and median aggregates."""
    by_pid = {m.patient_id: m for m in refs}
    pred_ids = [m.patient_id for m in preds]
    if sorted(pred_ids) != sorted(by_pid):
        missing = sorted(set(pred_ids) ^ set(by_pid))
        raise DataError(f"prediction/reference case lists differ on: {missing}")

    report = MetricsReport()
    for pred in sorted(preds, key=lambda m: m.patient_id):
        ref = by_pid[pred.patient_id]
        for label in FOREGROUND_CLASSES:
            flags = []
            if not (pred.labels == label).any():
                flags.append("pred_empty")
            if not (ref.labels == label).any():
                flags.append("ref_empty")
            sp = extract_surface(pred, label, "prediction")
            sr = extract_surface(ref, label, "reference")
            report.rows.append(MetricsRow(
                patient=pred.patient_id, label=label,
                dice=dice_score(pred, ref, label),
                jaccard=jaccard(pred, ref, label),
                asd_mm=avg_surface_distance(sp, sr),
                hd_mm=hausdorff(sp, sr),
                flags=";".join(flags)))

    for label in FOREGROUND_CLASSES:
        rows = report.per_class(label)
        for which, fn in (("mean", np.mean), ("median", np.median)):
            report.aggregates.append(MetricsRow(
                patient=which, label=label,
                dice=float(fn([r.dice for r in rows])),
                jaccard=float(fn([r.jaccard for r in rows])),
                asd_mm=float(fn([r.asd_mm for r in rows])),
                hd_mm=float(fn([r.hd_mm for r in rows])),
                flags=""))
    if refs:
        report.spacing_note = (
            f"distances in mm at spacing {tuple(refs[0].spacing)}")
    return report
