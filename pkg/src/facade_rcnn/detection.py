"""Proposal stage and generalized-box head: anchors, box coding, losses,
non-maximum suppression and decoding to quadrilaterals.

Boxes are (x_min, y_min, x_max, y_max) in image pixels. Regression deltas
use the usual (dx, dy, dw, dh) parameterisation with log-ratio sizes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import ops
from .geometry import (GeneralizedBBox, box_iou, corners_from_boxes, is_valid_quad,
                       quad_iou)
from .tensor import Tensor

MAX_LOG_RATIO = float(np.log(1000.0 / 16))
MIN_BOX_SIDE = 1e-2


@dataclass
class DetectionTarget:
    """Head target: class index plus (2, 4) deltas, ``None`` for background."""

    cls_index: int
    deltas: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.deltas is not None:
            self.deltas = np.asarray(self.deltas, dtype=np.float64).reshape(2, 4)
            if not np.all(np.isfinite(self.deltas)):
                raise ValueError("regression deltas must be finite")


def generate_anchors(feature_shape, stride, scales: Sequence[float],
                     ratios: Sequence[float]) -> np.ndarray:
    """Anchors [H_f * W_f * |scales| * |ratios|, 4] centred on feature cells.

    Order: row-major over cells, then scales, then ratios. ``ratio`` is
    height / width at constant area ``scale**2``.
    """
    hf, wf = feature_shape
    sy, sx = (stride, stride) if np.isscalar(stride) else stride
    if sy <= 0 or sx <= 0 or any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise ValueError("strides, scales and ratios must be positive")
    shapes = []
    for s in scales:
        for r in ratios:
            shapes.append((s / np.sqrt(r), s * np.sqrt(r)))
    shapes = np.asarray(shapes)
    cy = (np.arange(hf) + 0.5) * sy
    cx = (np.arange(wf) + 0.5) * sx
    centers = np.stack(np.meshgrid(cx, cy, indexing="xy"), axis=-1).reshape(-1, 1, 2)
    half = shapes[None] / 2
    boxes = np.concatenate([centers - half, centers + half], axis=-1)
    return boxes.reshape(-1, 4)


def clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


def encode_boxes(boxes: np.ndarray, ref: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 4)
    rw = np.maximum(ref[:, 2] - ref[:, 0], MIN_BOX_SIDE)
    rh = np.maximum(ref[:, 3] - ref[:, 1], MIN_BOX_SIDE)
    bw = np.maximum(boxes[:, 2] - boxes[:, 0], MIN_BOX_SIDE)
    bh = np.maximum(boxes[:, 3] - boxes[:, 1], MIN_BOX_SIDE)
    dx = ((boxes[:, 0] + boxes[:, 2]) - (ref[:, 0] + ref[:, 2])) / 2 / rw
    dy = ((boxes[:, 1] + boxes[:, 3]) - (ref[:, 1] + ref[:, 3])) / 2 / rh
    return np.stack([dx, dy, np.log(bw / rw), np.log(bh / rh)], axis=1)


def decode_boxes(deltas: np.ndarray, ref: np.ndarray) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 4)
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    cx = (ref[:, 0] + ref[:, 2]) / 2 + deltas[:, 0] * rw
    cy = (ref[:, 1] + ref[:, 3]) / 2 + deltas[:, 1] * rh
    w = rw * np.exp(np.clip(deltas[:, 2], -MAX_LOG_RATIO, MAX_LOG_RATIO))
    h = rh * np.exp(np.clip(deltas[:, 3], -MAX_LOG_RATIO, MAX_LOG_RATIO))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def label_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.7,
                  neg_iou: float = 0.3):
    """Per-anchor label (1 pos, 0 neg, -1 ignore) and matched gt index."""
    n = len(anchors)
    labels = -np.ones(n, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, matched
    iou = box_iou(anchors, gt_boxes)
    matched = iou.argmax(axis=1)
    best = iou.max(axis=1)
    labels[best <= neg_iou] = 0
    labels[best >= pos_iou] = 1
    per_gt = iou.max(axis=0)
    for g in range(len(gt_boxes)):
        if per_gt[g] > 0:
            hits = np.flatnonzero(iou[:, g] == per_gt[g])
            labels[hits] = 1
            matched[hits] = g
    return labels, matched


def sample_anchors(labels: np.ndarray, batch_size: int = 256,
                   rng: Optional[np.random.Generator] = None):
    """1:1 positive:negative sample; returns (positive idx, negative idx).

    Without ``rng`` the first eligible indices are taken.
    """
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), batch_size // 2)
    n_neg = min(len(neg), n_pos if n_pos else batch_size // 2)

    def pick(idx, k):
        if k >= len(idx):
            return idx
        if rng is None:
            return idx[:k]
        return np.sort(rng.choice(idx, size=k, replace=False))

    return pick(pos, n_pos), pick(neg, n_neg)


def proposal_loss(objectness: Tensor, deltas: Tensor, anchors: np.ndarray,
                  gt_boxes: np.ndarray, rng: Optional[np.random.Generator] = None,
                  batch_size: int = 256, pos_iou: float = 0.7,
                  neg_iou: float = 0.3) -> Tensor:
    """Objectness BCE plus positive-anchor smooth-L1, over the sampled anchors.

    ``objectness`` holds logits [A]; ``deltas`` is [A, 4]. Both terms are
    divided by the number of sampled anchors.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels, matched = label_anchors(anchors, gt_boxes, pos_iou, neg_iou)
    pos, neg = sample_anchors(labels, batch_size, rng)
    n = len(pos) + len(neg)
    if n == 0:
        return objectness.sum() * 0.0
    weight = np.zeros(len(anchors))
    weight[pos] = 1.0
    weight[neg] = 1.0
    target = (labels == 1).astype(np.float64)
    loss = ops.bce_with_logits(objectness, target, weight)
    if len(pos):
        reg_t = encode_boxes(gt_boxes[matched[pos]], anchors[pos])
        reg = ops.smooth_l1(deltas[pos] - Tensor(reg_t, dtype=deltas.dtype)).sum()
        loss = loss + reg
    return loss * (1.0 / n)


def detection_loss(cls_logits: Tensor, box_deltas: Tensor,
                   targets: Sequence[DetectionTarget]) -> Tensor:
    """Generalized-box head loss averaged over the K generalized boxes.

    ``cls_logits`` [K, C], ``box_deltas`` [K, 2, 4]. Each box contributes its
    cross-entropy plus, for foreground targets, the smooth-L1 of both
    rectangles summed over the four delta components. With N_bbox = 2K
    rectangles the 2/N_bbox prefactor is 1/K.
    """
    k = len(targets)
    if cls_logits.shape[0] != k or box_deltas.shape[0] != k:
        raise ValueError(
            f"length mismatch: {cls_logits.shape[0]} class rows, {box_deltas.shape[0]} "
            f"delta rows, {k} targets")
    if k == 0:
        return cls_logits.sum() * 0.0
    cls_t = np.array([t.cls_index for t in targets], dtype=np.int64)
    loss = ops.cross_entropy(cls_logits, cls_t, axis=1, reduction="sum")
    fg = [i for i, t in enumerate(targets) if t.deltas is not None]
    if fg:
        reg_t = np.stack([targets[i].deltas for i in fg])
        diff = box_deltas[np.array(fg)] - Tensor(reg_t, dtype=box_deltas.dtype)
        loss = loss + ops.smooth_l1(diff).sum()
    return loss * (1.0 / k)


def nms(items: Sequence, scores: Sequence[float], iou_threshold: float,
        iou_fn: Callable = quad_iou) -> List[int]:
    """Greedy suppression; returns kept indices by descending score."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep: List[int] = []
    remaining = list(order)
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [j for j in remaining if iou_fn(items[best], items[j]) <= iou_threshold]
    return keep


def nms_boxes(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Vectorised greedy NMS for axis-aligned boxes."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes = np.asarray(boxes)[order]
    iou = box_iou(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    for i in range(len(order)):
        if alive[i]:
            alive[i + 1:] &= iou[i, i + 1:] <= iou_threshold
    return order[alive]


def decode_detections(cls_logits, box_deltas, proposals, score_threshold: float = 0.05,
                      iou_threshold: float = 0.5, class_ids: Optional[Sequence[int]] = None,
                      image_size: Optional[tuple] = None) -> List[GeneralizedBBox]:
    """Turn head outputs into generalized boxes.

    The last class column is background. Each proposal gets both rectangles
    from its two delta rows; proposals whose arg-max is background or whose
    score is at most ``score_threshold`` are dropped, as are self-intersecting
    quads. Per-class NMS uses raster quad IoU. ``class_ids`` maps head class
    columns to output labels.
    """
    logits = cls_logits.data if isinstance(cls_logits, Tensor) else np.asarray(cls_logits)
    deltas = box_deltas.data if isinstance(box_deltas, Tensor) else np.asarray(box_deltas)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0:
        return []
    probs = ops.softmax(logits.astype(np.float64), axis=1)
    deltas = deltas.reshape(len(proposals), 2, 4)
    rect1 = decode_boxes(deltas[:, 0], proposals)
    rect2 = decode_boxes(deltas[:, 1], proposals)
    if image_size is not None:
        rect1 = clip_boxes(rect1, *image_size)
        rect2 = clip_boxes(rect2, *image_size)
    background = probs.shape[1] - 1

    by_class: dict = {}
    for i in range(len(proposals)):
        c = int(np.argmax(probs[i]))
        if c == background or probs[i, c] <= score_threshold:
            continue
        corners = corners_from_boxes((rect1[i], rect2[i]))
        if not is_valid_quad(corners):
            continue
        label = class_ids[c] if class_ids is not None else c
        by_class.setdefault(c, []).append(
            GeneralizedBBox(rect1[i], rect2[i], probs[i], label=label))

    out: List[GeneralizedBBox] = []
    for c in sorted(by_class):
        boxes = by_class[c]
        keep = nms([b.corners for b in boxes], [b.score for b in boxes], iou_threshold,
                   lambda a, b: quad_iou(a, b, resolution=2.0))
        out.extend(boxes[i] for i in keep)
    out.sort(key=lambda b: -b.score)
    return out


def detections_record(image_id: str, detections: Sequence[GeneralizedBBox]) -> str:
    """One JSON-lines record: image id and per detection 8 corner coordinates,
    class index and score."""
    dets = []
    for d in detections:
        tl, tr, bl, br = d.corners
        dets.append({"corners": [float(v) for v in (*tl, *tr, *br, *bl)],
                     "class": int(d.label), "score": d.score})
    return json.dumps({"image_id": image_id, "detections": dets})
