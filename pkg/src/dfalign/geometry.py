"""Box-normalized landmark coordinates, NE/PDL metrics and difficulty subsets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np

VISIBLE, INVISIBLE, TRUNCATED = 0, 1, 2
VISIBILITY_NAMES = ("visible", "invisible", "truncated")

LANDMARK_NAMES = (
    "left_collar", "right_collar", "left_sleeve", "right_sleeve",
    "left_waistline", "right_waistline", "left_hem", "right_hem",
)

SUBSETS = ("normal-pose", "medium-pose", "large-pose", "medium-zoom", "large-zoom")
POSE_TO_SUBSET = {"front": "normal-pose", "side": "medium-pose", "back": "large-pose"}


@dataclass(frozen=True)
class BBox:
    x_c: float
    y_c: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"bounding box must have positive size, got {self.width}x{self.height}")

    def as_tuple(self):
        return (self.x_c, self.y_c, self.width, self.height)


@dataclass
class LandmarkSet:
    coords: np.ndarray       # (N, 2)
    visibility: np.ndarray   # (N,) ints in {VISIBLE, INVISIBLE, TRUNCATED}

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.int64).reshape(-1)
        if len(self.coords) != len(self.visibility):
            raise ValueError("coords and visibility disagree on the number of landmarks")
        if np.any((self.visibility < 0) | (self.visibility > 2)):
            raise ValueError("visibility states must be 0, 1 or 2")

    def __len__(self):
        return len(self.visibility)

    @property
    def included(self) -> np.ndarray:
        return self.visibility != TRUNCATED


def _box_arrays(box):
    if isinstance(box, BBox):
        box = box.as_tuple()
    box = np.asarray(box, dtype=float)
    if np.any(box[..., 2:] <= 0):
        raise ValueError("bounding box must have positive size")
    return box[..., None, :2], box[..., None, 2:]


def normalize_landmarks(points, box) -> np.ndarray:
    """Pixel (..., N, 2) points to box-relative units: (p - center) / size.

    ``box`` is a :class:`BBox` or an array of (x_c, y_c, w, h) rows matching
    the leading dimensions of ``points``.
    """
    center, size = _box_arrays(box)
    return (np.asarray(points, dtype=float) - center) / size


def denormalize_landmarks(points, box) -> np.ndarray:
    center, size = _box_arrays(box)
    return np.asarray(points, dtype=float) * size + center


def landmark_errors(pred, gt, gt_visibility) -> np.ndarray:
    """Per-landmark l2 distances, NaN where the ground truth is truncated.

    Works on single samples (N, 2) or batches (S, N, 2).
    """
    d = np.linalg.norm(np.asarray(pred, float) - np.asarray(gt, float), axis=-1)
    return np.where(np.asarray(gt_visibility) == TRUNCATED, np.nan, d)


def normalized_error(pred: LandmarkSet, gt: LandmarkSet) -> tuple[np.ndarray, float | None]:
    """Per-landmark NE (NaN for truncated) and their mean (None when all are truncated)."""
    if len(pred) != len(gt):
        raise ValueError(f"landmark count mismatch: {len(pred)} vs {len(gt)}")
    ne = landmark_errors(pred.coords, gt.coords, gt.visibility)
    if np.all(np.isnan(ne)):
        return ne, None
    return ne, float(np.nanmean(ne))


def per_sample_mean_error(pred, gt, gt_visibility) -> np.ndarray:
    """Mean NE over the non-truncated landmarks of each sample (NaN if none)."""
    ne = landmark_errors(pred, gt, gt_visibility)
    counts = np.sum(~np.isnan(ne), axis=-1)
    total = np.nansum(ne, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, total / np.maximum(counts, 1), np.nan)


def per_landmark_mean_error(pred, gt, gt_visibility) -> np.ndarray:
    """Column means over samples of (S, N) errors; NaN where no sample counts."""
    ne = landmark_errors(pred, gt, gt_visibility)
    counts = np.sum(~np.isnan(ne), axis=0)
    total = np.nansum(ne, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, total / np.maximum(counts, 1), np.nan)


def mean_ne(pred, gt, gt_visibility) -> float:
    """Dataset NE: the average of the per-landmark column means."""
    cols = per_landmark_mean_error(pred, gt, gt_visibility)
    return float(np.nanmean(cols)) if np.any(~np.isnan(cols)) else float("nan")


def pdl(preds, gts, gt_visibility, threshold_px: float, image_side: float) -> float:
    """Fraction of non-truncated landmarks within ``threshold_px`` pixels (inclusive).

    Coordinates are box-normalized; the box is taken to span ``image_side`` pixels.
    """
    if threshold_px <= 0:
        raise ValueError("threshold_px must be positive")
    d = landmark_errors(preds, gts, gt_visibility) * image_side
    valid = ~np.isnan(d)
    if not valid.any():
        return float("nan")
    return float(np.sum(d[valid] <= threshold_px) / valid.sum())


def pdl_curve(preds, gts, gt_visibility, thresholds: Iterable[float], image_side: float) -> np.ndarray:
    return np.array([pdl(preds, gts, gt_visibility, t, image_side) for t in thresholds])


def classify_subset(pose: str, visibility) -> str:
    """Difficulty subset: zoom-in (by truncated count) takes precedence over pose."""
    n_trunc = int(np.sum(np.asarray(visibility) == TRUNCATED))
    if n_trunc > 3:
        return "large-zoom"
    if n_trunc > 1:
        return "medium-zoom"
    try:
        return POSE_TO_SUBSET[pose]
    except KeyError:
        raise ValueError(f"unknown pose class {pose!r}") from None


def metrics_rows(pred, gt, gt_visibility, subsets, threshold_px, image_side,
                 names=LANDMARK_NAMES):
    """Rows of (subset, landmark_name, NE, PDL, sample_count).

    Produces an "all" block then one block per difficulty subset; each block
    has one row per landmark followed by a "mean" row (mean of the landmark
    rows, NaN-skipping).
    """
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    gt_visibility = np.asarray(gt_visibility)
    subsets = np.asarray(subsets)
    rows = []
    for subset in ("all",) + SUBSETS:
        sel = np.ones(len(subsets), bool) if subset == "all" else subsets == subset
        count = int(sel.sum())
        if count:
            ne = per_landmark_mean_error(pred[sel], gt[sel], gt_visibility[sel])
            rates = [pdl(pred[sel][:, i:i + 1], gt[sel][:, i:i + 1], gt_visibility[sel][:, i:i + 1],
                         threshold_px, image_side) for i in range(len(names))]
        else:
            ne = np.full(len(names), np.nan)
            rates = [float("nan")] * len(names)
        for name, e, r in zip(names, ne, rates):
            rows.append((subset, name, float(e), float(r), count))
        if count:
            mean_e = float(np.nanmean(ne)) if np.any(~np.isnan(ne)) else float("nan")
            mean_r = pdl(pred[sel], gt[sel], gt_visibility[sel], threshold_px, image_side)
        else:
            mean_e = mean_r = float("nan")
        rows.append((subset, "mean", mean_e, mean_r, count))
    return rows


METRICS_HEADER = ("subset", "landmark_name", "NE", "PDL@threshold", "sample_count")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "" if np.isnan(x) else f"{x:.6f}"


def write_metrics_csv(path, rows, extra_columns: tuple[tuple[str, str], ...] = ()):
    """Write metric rows; ``extra_columns`` are constant (name, value) pairs prepended."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c for c, _ in extra_columns] + list(METRICS_HEADER))
        for row in rows:
            w.writerow([v for _, v in extra_columns] + [_fmt(v) if not isinstance(v, str) else v for v in row])
