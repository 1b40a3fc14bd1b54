"""Convex targets from predictions and the convex regularisation loss."""
from __future__ import annotations

from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .geometry import mask_hull, rasterize_convex_polygon
from .tensor import Tensor

HULL = "hull"
GT_INSTANCE = "gt-instance"


def convex_target(pred_mask: np.ndarray, gt_instances: Sequence[np.ndarray]) -> np.ndarray:
    """Union over instances of the rasterised hull of ``pred & instance``."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    h, w = pred_mask.shape
    out = np.zeros((h, w), dtype=bool)
    for inst in gt_instances:
        inst = np.asarray(inst, dtype=bool)
        if inst.shape != pred_mask.shape:
            raise ValueError(
                f"instance mask extent {inst.shape} differs from prediction {pred_mask.shape}")
        both = pred_mask & inst
        if not both.any():
            continue
        out |= rasterize_convex_polygon(mask_hull(both), w, h)
    return out


def convex_targets(pred_labels: np.ndarray, instances: Mapping[int, Sequence[np.ndarray]],
                   classes: Sequence[int], mode: str = HULL) -> Dict[int, np.ndarray]:
    """Target mask per convex class.

    ``mode="gt-instance"`` replaces the hull with the full ground-truth
    instance union (the fixed-target variant used in ablations).
    """
    out = {}
    for c in classes:
        insts = instances.get(c, [])
        if mode == GT_INSTANCE:
            tgt = np.zeros(pred_labels.shape, dtype=bool)
            for inst in insts:
                tgt |= np.asarray(inst, dtype=bool)
        elif mode == HULL:
            tgt = convex_target(pred_labels == c, insts)
        else:
            raise ValueError(f"unknown convex target mode {mode!r}")
        out[c] = tgt
    return out


def convex_loss(logits: Tensor, gt_labels: Optional[np.ndarray],
                instances: Mapping[int, Sequence[np.ndarray]], classes: Sequence[int],
                label_source: str = "class", mode: str = HULL,
                ignore_index: int = 255, targets: Optional[Mapping[int, np.ndarray]] = None
                ) -> Tensor:
    """Convex regulariser for one image's logits [C, H, W].

    For each convex class the mean pixel cross-entropy over its target mask
    is taken, labelling target pixels with that class (``label_source=
    "class"``) or with their ground-truth label (``"gt"``). The class terms
    are averaged over ``len(classes)``; empty targets contribute zero.
    Targets come from the arg-max prediction and are constants for backward.
    """
    classes = list(classes)
    if not classes:
        raise ValueError("convex loss needs at least one convex class")
    if targets is None:
        pred = np.argmax(logits.data, axis=0)
        targets = convex_targets(pred, instances, classes, mode)
    total = None
    for c in classes:
        tgt = targets[c]
        if not tgt.any():
            continue
        if label_source == "class":
            labels = np.full(tgt.shape, c, dtype=np.int64)
        elif label_source == "gt":
            labels = np.asarray(gt_labels, dtype=np.int64)
        else:
            raise ValueError(f"unknown label source {label_source!r}")
        term = ops.cross_entropy(logits, labels, axis=0, ignore_index=ignore_index, mask=tgt)
        total = term if total is None else total + term
    if total is None:
        return logits.sum() * 0.0
    return total * (1.0 / len(classes))
