import numpy as np
import pytest
from hypothesis import given, strategies as st

from facade_rcnn.geometry import GeneralizedBBox
from facade_rcnn.metrics import (DETECTION, confusion_matrix, fuse, metrics_report, miou,
                                 pixel_accuracy)

from oracles import confusion_counting, fuse_per_pixel


def _det(x0, y0, x1, y1, score, label, n=3):
    probs = np.full(n, (1 - score) / (n - 1))
    probs[0] = score
    return GeneralizedBBox((x0, y0, x1, y1), (x0, y0, x1, y1), probs, label=label)


def _quad(d):
    tl, tr, bl, br = d.corners
    return np.array([tl, tr, br, bl])


def test_no_detections_identity():
    sem = np.arange(16).reshape(4, 4) % 3
    out = fuse(sem, [], 0.5)
    assert np.array_equal(out.labels, sem) and not out.from_detection.any()


def test_single_box_applied():
    sem = np.zeros((8, 8), int)
    out = fuse(sem, [_det(2, 2, 5, 6, 0.6, 2)], 0.5)
    assert (out.labels[2:6, 2:5] == 2).all() and out.labels.sum() == 2 * 12
    assert (out.provenance[2:6, 2:5] == DETECTION).all()


def test_threshold_one_is_identity():
    sem = np.ones((6, 6), int)
    out = fuse(sem, [_det(0, 0, 6, 6, 1.0, 2, n=2)], 1.0)
    assert np.array_equal(out.labels, sem)


def test_threshold_zero_applies_all():
    sem = np.zeros((8, 8), int)
    dets = [_det(0, 0, 3, 3, 0.34, 1), _det(4, 4, 8, 8, 0.4, 2)]
    out = fuse(sem, dets, 0.0)
    assert (out.labels[:3, :3] == 1).all() and (out.labels[4:, 4:] == 2).all()


def test_overlap_max_score_wins():
    sem = np.zeros((10, 10), int)
    dets = [_det(1, 1, 7, 7, 0.6, 1), _det(4, 4, 9, 9, 0.9, 2)]
    out = fuse(sem, dets, 0.5)
    ref = fuse_per_pixel(sem, [_quad(d) for d in dets], [0.6, 0.9], [1, 2], 0.5)
    assert np.array_equal(out.labels, ref)
    assert out.labels[5, 5] == 2 and out.labels[2, 2] == 1


@given(st.integers(0, 2**31 - 1))
def test_fusion_matches_oracle_and_is_monotone(seed):
    r = np.random.default_rng(seed)
    sem = r.integers(0, 3, (10, 10))
    dets = []
    for _ in range(3):
        x0, y0 = r.integers(0, 8, 2)
        x1, y1 = x0 + r.integers(1, 5), y0 + r.integers(1, 5)
        dets.append(_det(x0, y0, x1, y1, float(np.round(r.uniform(0.34, 1.0), 2)),
                         int(r.integers(3))))
    prev = None
    for t in (0.0, 0.1, 0.3, 0.5, 0.7, 0.9):
        out = fuse(sem, dets, t)
        ref = fuse_per_pixel(sem, [_quad(d) for d in dets], [d.score for d in dets],
                             [d.label for d in dets], t)
        assert np.array_equal(out.labels, ref)
        if prev is not None:
            assert not (out.from_detection & ~prev).any()
        prev = out.from_detection


def test_bad_threshold():
    with pytest.raises(ValueError):
        fuse(np.zeros((2, 2), int), [], 1.5)


def test_perfect_prediction():
    gt = np.random.default_rng(0).integers(0, 4, (8, 8))
    m = confusion_matrix(gt, gt, 4)
    assert miou(m) == 1.0 and pixel_accuracy(m) == 1.0


def test_constant_prediction_half_half():
    gt = np.zeros((4, 4), int)
    gt[:, 2:] = 1
    m = confusion_matrix(np.zeros_like(gt), gt, 2)
    assert miou(m) == pytest.approx(0.25) and pixel_accuracy(m) == pytest.approx(0.5)


def test_ignore_excluded():
    gt = np.array([[0, 255], [1, 1]])
    pred = np.array([[0, 1], [1, 0]])
    m = confusion_matrix(pred, gt, 2)
    assert m.sum() == 3 and pixel_accuracy(m) == pytest.approx(2 / 3)


def test_extent_mismatch():
    with pytest.raises(ValueError, match="extent"):
        confusion_matrix(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)


@given(st.integers(0, 2**31 - 1))
def test_confusion_matches_counting_oracle(seed):
    r = np.random.default_rng(seed)
    gt = r.integers(0, 4, (16, 16))
    gt[r.random((16, 16)) < 0.1] = 255
    pred = r.integers(0, 4, (16, 16))
    m = confusion_matrix(pred, gt, 4)
    assert np.array_equal(m, confusion_counting(pred, gt, 4))
    rep = metrics_report(m)
    assert 0.0 <= rep["miou"] <= 1.0 and 0.0 <= rep["accuracy"] <= 1.0
    valid = gt != 255
    assert (rep["miou"] == 1.0) == bool(np.all(pred[valid] == gt[valid]))


def test_absent_classes_not_averaged():
    gt = np.zeros((2, 2), int)
    m = confusion_matrix(gt, gt, 5)
    rep = metrics_report(m, ["a", "b", "c", "d", "e"])
    assert rep["miou"] == 1.0 and rep["per_class_iou"]["b"] is None
