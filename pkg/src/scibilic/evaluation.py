"""Synthetic-anomaly evaluation: insertion, binarization, overlap scores, bootstrap CIs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .numkernel import ShapeError
from .rng import RngStream

__all__ = [
    "AnomalyInstance",
    "PlacementError",
    "EvalReport",
    "valid_placements",
    "insert_anomaly",
    "minmax_normalize",
    "binarize_largest_component",
    "dice",
    "iou",
    "detection_rate",
    "bootstrap_ci",
    "threshold_sweep",
    "write_report",
    "DEFAULT_THRESHOLDS",
    "DEFAULT_IOU_THRESHOLDS",
    "DETECTION_BINARIZATION",
]

DETECTION_BINARIZATION = 0.15
DEFAULT_THRESHOLDS = (0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
DEFAULT_IOU_THRESHOLDS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class PlacementError(ValueError):
    pass


@dataclass
class AnomalyInstance:
    corrupted: np.ndarray
    truth_mask: np.ndarray
    placement: tuple[int, int]
    side: int


def valid_placements(foreground, side: int) -> np.ndarray:
    """``(k, 2)`` array of top-left offsets whose side x side square lies in ``foreground``."""
    fg = np.asarray(foreground, dtype=bool)
    if side < 1 or side > min(fg.shape):
        return np.zeros((0, 2), dtype=np.int64)
    inside = sliding_window_view(fg, (side, side)).all(axis=(2, 3))
    return np.argwhere(inside)


def insert_anomaly(source, foreground, side: int, rng: RngStream) -> AnomalyInstance:
    """Zero a side x side square placed uniformly among offsets fully inside ``foreground``."""
    src = np.asarray(source, dtype=np.float32)
    fg = np.asarray(foreground, dtype=bool)
    if src.shape != fg.shape:
        raise ShapeError(f"source {src.shape} and foreground {fg.shape} differ in shape")
    offsets = valid_placements(fg, side)
    if len(offsets) == 0:
        raise PlacementError(f"no {side}x{side} square fits entirely inside the foreground mask")
    r, c = (int(v) for v in offsets[int(rng.integers(len(offsets)))])
    mask = np.zeros(src.shape, dtype=bool)
    mask[r:r + side, c:c + side] = True
    corrupted = src.copy()
    corrupted[mask] = 0.0
    return AnomalyInstance(corrupted, mask, (r, c), side)


def minmax_normalize(values, region=None) -> np.ndarray:
    """Scale to [0, 1] using the extremes inside ``region`` (default: everywhere).

    Voxels outside ``region`` are set to 0.
    """
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("map contains non-finite values")
    if region is None:
        region = np.ones(arr.shape, dtype=bool)
    region = np.asarray(region, dtype=bool)
    if region.shape != arr.shape:
        raise ShapeError(f"region {region.shape} and map {arr.shape} differ in shape")
    out = np.zeros_like(arr)
    if not region.any():
        return out
    vals = arr[region]
    lo, hi = vals.min(), vals.max()
    if hi > lo:
        out[region] = (vals - lo) / (hi - lo)
    return out


def binarize_largest_component(heatmap, threshold: float, normalize: bool = True, region=None) -> np.ndarray:
    """Largest 4-connected component of ``heatmap >= threshold``.

    The map is min-max scaled to [0, 1] first unless ``normalize`` is False.
    With ``region`` given, scaling uses only voxels inside it and candidates
    outside it are discarded. Ties go to the component met first in raster order.
    """
    arr = minmax_normalize(heatmap, region) if normalize else np.asarray(heatmap, dtype=np.float64)
    candidates = arr >= threshold
    if region is not None:
        candidates &= np.asarray(region, dtype=bool)
    labels, count = ndimage.label(candidates)
    if count == 0:
        return np.zeros(arr.shape, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def _masks(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _masks(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(a, b) -> float:
    a, b = _masks(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def detection_rate(cases, iou_threshold: float) -> float:
    """Fraction of ``(prediction, truth)`` pairs with IoU >= ``iou_threshold``."""
    cases = list(cases)
    if not cases:
        raise ValueError("detection_rate needs at least one case")
    hits = sum(iou(p, t) >= iou_threshold for p, t in cases)
    return hits / len(cases)


def bootstrap_ci(values, resamples: int = 1000, level: float = 0.95, rng: RngStream | None = None):
    """Percentile bootstrap interval for the mean."""
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise ValueError("bootstrap_ci needs at least one value")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if resamples < 1:
        raise ValueError(f"resamples must be >= 1, got {resamples}")
    if vals.min() == vals.max():
        return float(vals[0]), float(vals[0])
    rng = rng or RngStream(0)
    idx = rng.integers(vals.size, size=(resamples, vals.size))
    means = vals[idx].mean(axis=1)
    lo, hi = np.percentile(means, [50.0 * (1.0 - level), 50.0 * (1.0 + level)])
    return float(lo), float(hi)


@dataclass
class EvalReport:
    case_ids: list
    thresholds: list
    iou_thresholds: list
    dice: np.ndarray  # (cases, thresholds)
    iou: np.ndarray  # (cases, thresholds)
    detection_iou: np.ndarray  # (cases,), IoU at the detection binarization
    dice_curve: list = field(default_factory=list)  # (threshold, mean, lo, hi)
    detection_curve: list = field(default_factory=list)  # (iou_threshold, rate, lo, hi)
    detection_binarization: float = DETECTION_BINARIZATION

    @property
    def best(self):
        """``(threshold, mean_dice)`` at the peak of the dice curve (first on ties)."""
        means = [row[1] for row in self.dice_curve]
        k = int(np.argmax(means))
        return self.dice_curve[k][0], self.dice_curve[k][1]

    def detection_at(self, iou_threshold: float) -> float:
        for thr, rate, _, _ in self.detection_curve:
            if np.isclose(thr, iou_threshold):
                return rate
        return float(np.mean(self.detection_iou >= iou_threshold))


def threshold_sweep(cases, thresholds=DEFAULT_THRESHOLDS, iou_thresholds=DEFAULT_IOU_THRESHOLDS,
                    resamples: int = 1000, level: float = 0.95, rng: RngStream | None = None,
                    case_ids=None, detection_binarization: float = DETECTION_BINARIZATION) -> EvalReport:
    """Dice-vs-threshold and detection-vs-IoU curves with bootstrap intervals.

    ``cases`` is a sequence of ``(scibilic_map, truth_mask)`` or
    ``(scibilic_map, truth_mask, region)``; a region restricts normalization
    and binarization to that mask.
    """
    cases = list(cases)
    thresholds = [float(t) for t in thresholds]
    iou_thresholds = [float(t) for t in iou_thresholds]
    if not cases or not thresholds or not iou_thresholds:
        raise ValueError("cases, thresholds and iou_thresholds must be non-empty")
    if any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise ValueError(f"binarization thresholds must lie in [0, 1]: {thresholds}")
    rng = rng or RngStream(0)
    case_ids = list(case_ids) if case_ids is not None else [f"case{i:03d}" for i in range(len(cases))]
    d = np.zeros((len(cases), len(thresholds)))
    j = np.zeros_like(d)
    det = np.zeros(len(cases))
    for ci, case in enumerate(cases):
        heat, truth = case[0], case[1]
        region = case[2] if len(case) > 2 else None
        normed = minmax_normalize(heat, region)
        for ti, t in enumerate(thresholds):
            pred = binarize_largest_component(normed, t, normalize=False, region=region)
            d[ci, ti] = dice(pred, truth)
            j[ci, ti] = iou(pred, truth)
        pred = binarize_largest_component(normed, detection_binarization, normalize=False, region=region)
        det[ci] = iou(pred, truth)
    report = EvalReport(case_ids, thresholds, iou_thresholds, d, j, det,
                        detection_binarization=detection_binarization)
    for ti, t in enumerate(thresholds):
        col = d[:, ti]
        lo, hi = bootstrap_ci(col, resamples, level, rng.child("dice", ti))
        m = float(col.mean())
        report.dice_curve.append((t, m, min(lo, m), max(hi, m)))
    for k, it in enumerate(iou_thresholds):
        flags = (det >= it).astype(np.float64)
        lo, hi = bootstrap_ci(flags, resamples, level, rng.child("detect", k))
        r = float(flags.mean())
        report.detection_curve.append((it, r, min(lo, r), max(hi, r)))
    return report


def _fmt(v) -> str:
    return repr(float(v))


def write_report(report: EvalReport, directory) -> dict:
    """Writes ``dice_curve.csv``, ``detection_curve.csv`` and ``per_case.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"dice": directory / "dice_curve.csv", "detection": directory / "detection_curve.csv",
             "per_case": directory / "per_case.csv"}
    with open(paths["dice"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "mean_dice", "ci_lo", "ci_hi"])
        w.writerows([[_fmt(x) for x in row] for row in report.dice_curve])
    with open(paths["detection"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iou_threshold", "rate", "ci_lo", "ci_hi"])
        w.writerows([[_fmt(x) for x in row] for row in report.detection_curve])
    with open(paths["per_case"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "threshold", "dice", "iou", "detection_iou", "detected_at_iou_0.1"])
        for ci, cid in enumerate(report.case_ids):
            det = report.detection_iou[ci]
            for ti, t in enumerate(report.thresholds):
                w.writerow([cid, _fmt(t), _fmt(report.dice[ci, ti]), _fmt(report.iou[ci, ti]),
                            _fmt(det), int(det >= 0.1)])
    return paths
