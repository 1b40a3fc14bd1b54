"""Score-threshold fusion of detections into semantic maps, and metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .geometry import GeneralizedBBox, is_valid_quad, quad_polygon, rasterize_convex_polygon

SEMANTIC, DETECTION = 0, 1


@dataclass
class FusedPrediction:
    labels: np.ndarray
    provenance: np.ndarray  # DETECTION where a box overrode the semantic label

    @property
    def from_detection(self) -> np.ndarray:
        return self.provenance == DETECTION


def fuse(semantic: np.ndarray, detections: Sequence[GeneralizedBBox],
         threshold: float) -> FusedPrediction:
    """Override semantic labels inside every box whose score exceeds ``threshold``.

    Where boxes overlap the highest-scoring one decides; on equal scores the
    earlier box in ``detections`` wins.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"fusion threshold must be in [0, 1], got {threshold}")
    semantic = np.asarray(semantic)
    h, w = semantic.shape
    labels = semantic.copy()
    provenance = np.full((h, w), SEMANTIC, dtype=np.uint8)
    best = np.full((h, w), -np.inf)
    for det in detections:
        s = det.score
        if not s > threshold:
            continue
        corners = det.corners
        if not is_valid_quad(corners):
            continue
        region = rasterize_convex_polygon(quad_polygon(corners), w, h) & (s > best)
        labels[region] = det.label
        provenance[region] = DETECTION
        best[region] = s
    return FusedPrediction(labels, provenance)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int,
                     ignore_index: Optional[int] = 255) -> np.ndarray:
    """[n_classes, n_classes] counts indexed by (ground truth, prediction)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction extent {pred.shape} differs from ground truth {gt.shape}")
    valid = (gt >= 0) & (gt < n_classes)
    if ignore_index is not None:
        valid &= gt != ignore_index
    idx = gt[valid].astype(np.int64) * n_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=n_classes ** 2).reshape(n_classes, n_classes)


def class_iou(matrix: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from the ground truth."""
    tp = np.diag(matrix).astype(np.float64)
    present = matrix.sum(axis=1) > 0
    union = matrix.sum(axis=1) + matrix.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / union
    iou[~present] = np.nan
    return iou


def miou(matrix: np.ndarray) -> float:
    iou = class_iou(matrix)
    if np.all(np.isnan(iou)):
        return float("nan")
    return float(np.nanmean(iou))


def pixel_accuracy(matrix: np.ndarray) -> float:
    total = matrix.sum()
    return float(np.trace(matrix) / total) if total else float("nan")


def metrics_report(matrix: np.ndarray, class_names: Optional[Sequence[str]] = None) -> Dict:
    iou = class_iou(matrix)
    names = class_names or [str(i) for i in range(len(iou))]
    return {
        "per_class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, iou)},
        "miou": miou(matrix),
        "accuracy": pixel_accuracy(matrix),
    }
