"""Geometric IoU, semantic mIoU and distance-banded evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel import FREE, INVALID, SEMANTIC_KITTI_CLASSES, VoxelGrid

DEFAULT_BANDS = (12.8, 25.6, 51.2)


@dataclass
class ConfusionMatrix:
    """Joint counts over {free} + occupied classes; rows are ground truth, columns predictions."""

    counts: np.ndarray
    excluded: int = 0

    @classmethod
    def zeros(cls, num_classes: int = len(SEMANTIC_KITTI_CLASSES)) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0] - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.excluded + other.excluded)


def confusion_from_labels(pred: np.ndarray, gt: np.ndarray, num_classes: int, mask_invalid: bool = True) -> ConfusionMatrix:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.size} voxels, ground truth {gt.size}")
    if np.any(pred == INVALID):
        raise ValueError("predictions must not contain the invalid label")
    invalid = gt == INVALID
    if invalid.any() and not mask_invalid:
        raise ValueError("ground truth contains invalid voxels; enable mask_invalid")
    keep = ~invalid
    k = num_classes + 1
    counts = np.bincount(gt[keep] * k + pred[keep], minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, int(invalid.sum()))


def accumulate_confusion(pred: VoxelGrid, gt: VoxelGrid, mask_invalid: bool = True) -> ConfusionMatrix:
    if pred.spec != gt.spec:
        raise ValueError(f"spec mismatch: {pred.spec} vs {gt.spec}")
    return confusion_from_labels(pred.labels, gt.labels, max(pred.num_classes, gt.num_classes), mask_invalid)


def iou(cm: ConfusionMatrix) -> float:
    """Occupied-vs-free IoU in percent; NaN when nothing is occupied in either volume."""
    c = cm.counts
    tp = c[1:, 1:].sum()
    fp = c[FREE, 1:].sum()
    fn = c[1:, FREE].sum()
    denom = tp + fp + fn
    return float("nan") if denom == 0 else 100.0 * tp / denom


def per_class_iou(cm: ConfusionMatrix, absent: str = "zero") -> np.ndarray:
    """IoU per occupied class in percent.

    ``absent="zero"`` scores classes missing from both volumes as 0 (the
    benchmark convention); ``absent="skip"`` marks them NaN.
    """
    if absent not in ("zero", "skip"):
        raise ValueError("absent must be 'zero' or 'skip'")
    c = cm.counts
    tp = np.diag(c)[1:].astype(np.float64)
    union = c[1:, :].sum(axis=1) + c[:, 1:].sum(axis=0) - tp
    out = np.full(cm.num_classes, 0.0 if absent == "zero" else np.nan)
    nz = union > 0
    out[nz] = 100.0 * tp[nz] / union[nz]
    return out


def miou(cm: ConfusionMatrix, absent: str = "zero") -> tuple[float, np.ndarray]:
    per_class = per_class_iou(cm, absent)
    if absent == "skip":
        return (float(np.nanmean(per_class)) if np.any(~np.isnan(per_class)) else float("nan")), per_class
    return float(per_class.mean()), per_class


def band_slices(grid_spec, band: float) -> tuple[slice, slice, slice]:
    """Index window for forward x in [0, band], lateral y in [-band/2, band/2], full height."""
    ox, oy, _ = grid_spec.origin
    dx, dy, _ = grid_spec.voxel_size
    nx, ny, nz = grid_spec.dims
    x0, x1 = round((0.0 - ox) / dx), round((band - ox) / dx)
    y0, y1 = round((-band / 2 - oy) / dy), round((band / 2 - oy) / dy)
    if x0 < 0 or y0 < 0 or x1 > nx or y1 > ny or band <= 0:
        raise ValueError(f"band {band} m exceeds the grid extent")
    return slice(x0, x1), slice(y0, y1), slice(0, nz)


def banded_confusion(pred: VoxelGrid, gt: VoxelGrid, bands=DEFAULT_BANDS, mask_invalid: bool = True):
    if pred.spec != gt.spec:
        raise ValueError(f"spec mismatch: {pred.spec} vs {gt.spec}")
    k = max(pred.num_classes, gt.num_classes)
    out = {}
    for band in bands:
        window = band_slices(pred.spec, band)
        out[band] = confusion_from_labels(pred.labels[window], gt.labels[window], k, mask_invalid)
    return out


def banded_eval(pred: VoxelGrid, gt: VoxelGrid, bands=DEFAULT_BANDS, mask_invalid: bool = True, absent: str = "zero"):
    """Map each band (meters) to ``(IoU, mIoU)`` on the cropped volume."""
    return {
        band: (iou(cm), miou(cm, absent)[0])
        for band, cm in banded_confusion(pred, gt, bands, mask_invalid).items()
    }
