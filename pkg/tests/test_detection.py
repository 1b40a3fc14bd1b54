import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from facade_rcnn.detection import (DetectionTarget, decode_boxes, decode_detections,
                                   detection_loss, detections_record, encode_boxes,
                                   generate_anchors, label_anchors, nms, proposal_loss)
from facade_rcnn.geometry import quad_iou
from facade_rcnn.tensor import Tensor, grad_check

from oracles import nms_bruteforce


# ---------------------------------------------------------------- anchors

def test_single_centred_anchor():
    a = generate_anchors((1, 1), 8, [16.0], [1.0])
    assert np.allclose(a, [[-4.0, -4.0, 12.0, 12.0]])


def test_anchors_at_cell_centres():
    a = generate_anchors((2, 2), 8, [4.0], [1.0])
    centres = np.stack([(a[:, 0] + a[:, 2]) / 2, (a[:, 1] + a[:, 3]) / 2], axis=1)
    assert np.allclose(centres, [[4, 4], [12, 4], [4, 12], [12, 12]])


@given(st.integers(1, 6), st.integers(1, 6), st.lists(st.floats(2, 64), min_size=1, max_size=3),
       st.lists(st.floats(0.25, 4), min_size=1, max_size=3))
def test_anchor_count(hf, wf, scales, ratios):
    a = generate_anchors((hf, wf), 8, scales, ratios)
    assert a.shape == (hf * wf * len(scales) * len(ratios), 4)
    assert np.all(a[:, 2] > a[:, 0]) and np.all(a[:, 3] > a[:, 1])


def test_anchor_validation():
    with pytest.raises(ValueError):
        generate_anchors((2, 2), 0, [8.0], [1.0])


@given(st.integers(0, 2**31 - 1))
def test_encode_decode_inverse(seed):
    r = np.random.default_rng(seed)
    ref = np.sort(r.uniform(0, 50, (5, 2, 2)), axis=1).transpose(0, 2, 1).reshape(5, 4)[:, [0, 2, 1, 3]]
    ref[:, 2:] += 1
    box = ref + r.uniform(-3, 3, (5, 4))
    box[:, 2:] = np.maximum(box[:, 2:], box[:, :2] + 1)
    assert np.allclose(decode_boxes(encode_boxes(box, ref), ref), box, atol=1e-9)


# ---------------------------------------------------------------- proposal loss

ANCHORS = np.array([[0, 0, 10, 10], [20, 20, 30, 30], [0, 0, 10, 20]], float)
GT = np.array([[0, 0, 10, 10]], float)


def test_anchor_labels_fixture():
    labels, _ = label_anchors(ANCHORS, GT)
    assert labels.tolist() == [1, 0, -1]  # IoU 1, 0 and 0.5


def test_proposal_loss_fixture():
    # pos anchor 0: softplus(-1) ; neg anchor 1: softplus(-0.5) ;
    # smooth-L1 of deltas (0.1, -0.2, 1.5, 0) against 0: 0.005 + 0.02 + 1.0 ; over 2 samples
    obj = Tensor([1.0, -0.5, 2.0])
    deltas = Tensor([[0.1, -0.2, 1.5, 0.0], [9.0, 9.0, 9.0, 9.0], [9.0, 9.0, 9.0, 9.0]])
    loss = proposal_loss(obj, deltas, ANCHORS, GT)
    assert loss.item() == pytest.approx(0.9061693358491647, abs=1e-9)


def test_proposal_loss_perfect():
    obj = Tensor([60.0, -60.0, 0.0])
    assert proposal_loss(obj, Tensor(np.zeros((3, 4))), ANCHORS, GT).item() < 1e-12


def test_proposal_loss_no_gt_objectness_only():
    obj = Tensor(np.zeros(3))
    loss = proposal_loss(obj, Tensor(np.ones((3, 4))), ANCHORS, np.zeros((0, 4)), batch_size=4)
    assert loss.item() == pytest.approx(math.log(2.0))


def test_proposal_loss_gradient(rng):
    deltas = Tensor(rng.normal(size=(3, 4)))
    f = lambda z: proposal_loss(z, deltas, ANCHORS, GT)
    assert grad_check(f, rng.normal(size=3)) < 1e-4


# ---------------------------------------------------------------- detection loss

def test_detection_loss_exact_zero():
    cls = Tensor([[60.0, -60.0, -60.0]])
    loss = detection_loss(cls, Tensor(np.zeros((1, 2, 4))), [DetectionTarget(0, np.zeros((2, 4)))])
    assert loss.item() < 1e-12


def test_detection_loss_half_off():
    cls = Tensor([[80.0, -80.0]])
    d = np.zeros((1, 2, 4))
    d[0, 1, 2] = 0.5
    loss = detection_loss(cls, Tensor(d), [DetectionTarget(0, np.zeros((2, 4)))])
    assert loss.item() == pytest.approx(0.125, abs=1e-12)


def _k2_fixture():
    cls = Tensor(np.zeros((2, 3)))
    pred = np.array([[[0.5, 0, 0, 0], [0, 0, -2.0, 0]],
                     [[0.1, 0.2, 0.3, 0.4], [1.0, 0, 0, 0.25]]])
    targets = [DetectionTarget(0, np.zeros((2, 4))),
               DetectionTarget(1, [[0.1, 0.2, 0.3, 0.4], [0, 0, 0, 0]])]
    return cls, pred, targets


def test_detection_loss_k2_fixture():
    # box 0: ln 3 + (0.125 + 1.5) ; box 1: ln 3 + (0.5 + 0.03125) ; mean over K = 2
    cls, pred, targets = _k2_fixture()
    assert detection_loss(cls, Tensor(pred), targets).item() == pytest.approx(
        2.17673728866811, abs=1e-9)


def test_detection_loss_permutation_invariant():
    cls, pred, targets = _k2_fixture()
    swapped = detection_loss(Tensor(cls.data[::-1].copy()), Tensor(pred[::-1].copy()),
                             targets[::-1])
    assert swapped.item() == pytest.approx(detection_loss(cls, Tensor(pred), targets).item(),
                                           abs=1e-12)


def test_detection_loss_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        detection_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2, 4))),
                       [DetectionTarget(0)])


@given(st.integers(0, 2**31 - 1))
def test_detection_loss_non_negative(seed):
    r = np.random.default_rng(seed)
    targets = [DetectionTarget(int(r.integers(3)), r.normal(size=(2, 4))) for _ in range(3)]
    assert detection_loss(Tensor(r.normal(size=(3, 3))), Tensor(r.normal(size=(3, 2, 4))),
                          targets).item() >= 0.0


def test_detection_loss_gradient(rng):
    targets = [DetectionTarget(0, rng.normal(size=(2, 4))), DetectionTarget(2)]
    pred = Tensor(rng.normal(size=(2, 2, 4)))
    assert grad_check(lambda z: detection_loss(z, pred, targets), rng.normal(size=(2, 3))) < 1e-4
    cls = Tensor(rng.normal(size=(2, 3)))
    assert grad_check(lambda z: detection_loss(cls, z, targets),
                      rng.normal(size=(2, 2, 4)) * 0.5) < 1e-4


# ---------------------------------------------------------------- decoding and NMS

def test_zero_deltas_decode_to_proposal():
    props = np.array([[2.0, 3.0, 12.0, 9.0], [20.0, 20.0, 30.0, 40.0]])
    logits = np.array([[5.0, 0.0, 0.0], [0.0, 5.0, 0.0]])
    dets = decode_detections(logits, np.zeros((2, 2, 4)), props, iou_threshold=0.5)
    assert len(dets) == 2
    for d in dets:
        assert d.box_tlbr == d.box_trbl
        assert any(np.allclose(d.box_tlbr, p) for p in props)


def test_background_dropped():
    dets = decode_detections(np.array([[0.0, 5.0]]), np.zeros((1, 2, 4)), [[0, 0, 5, 5]])
    assert dets == []


def test_identical_boxes_one_survivor():
    props = np.array([[2.0, 3.0, 12.0, 9.0]] * 2)
    logits = np.array([[5.0, 0.0], [4.0, 0.0]])
    assert len(decode_detections(logits, np.zeros((2, 2, 4)), props)) == 1


def _sq(x, y, s):
    return ((x, y), (x + s, y), (x, y + s), (x + s, y + s))


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_matches_bruteforce(seed, thr):
    r = np.random.default_rng(seed)
    quads = [_sq(*r.integers(0, 12, 2), int(r.integers(3, 8))) for _ in range(8)]
    scores = list(np.round(r.random(8), 2))
    iou = [[quad_iou(a, b, resolution=2.0) for b in quads] for a in quads]
    got = nms(quads, scores, thr, lambda a, b: quad_iou(a, b, resolution=2.0))
    assert got == nms_bruteforce(scores, iou, thr)


def test_detections_record():
    logits = np.array([[5.0, 0.0]])
    dets = decode_detections(logits, np.zeros((1, 2, 4)), [[1, 2, 5, 8]], class_ids=[2])
    rec = json.loads(detections_record("img7", dets))
    assert rec["image_id"] == "img7"
    (d,) = rec["detections"]
    assert d["class"] == 2 and len(d["corners"]) == 8
    assert d["corners"] == [1, 2, 5, 2, 5, 8, 1, 8]
