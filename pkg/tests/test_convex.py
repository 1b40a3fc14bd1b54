import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from facade_rcnn.convex import convex_loss, convex_target, convex_targets
from facade_rcnn.geometry import rasterize_convex_polygon
from facade_rcnn.tensor import Tensor, grad_check

from oracles import halfplane_raster, hull_vertices_bruteforce


def _rect(h, w, r0, r1, c0, c1):
    m = np.zeros((h, w), bool)
    m[r0:r1, c0:c1] = True
    return m


def test_convex_prediction_is_fixed_point():
    inst = _rect(10, 10, 2, 6, 3, 8)
    assert np.array_equal(convex_target(inst, [inst]), inst)


def test_disjoint_prediction_gives_empty():
    pred = _rect(10, 10, 0, 2, 0, 2)
    assert not convex_target(pred, [_rect(10, 10, 5, 8, 5, 8)]).any()


def test_notch_filled_matches_composed_oracles():
    gt = _rect(12, 12, 2, 9, 2, 9)
    pred = gt.copy()
    pred[5:9, 5:9] = False  # L shape inside the instance
    got = convex_target(pred, [gt])
    r, c = np.nonzero(pred)
    # hull of pixel centres on the integer grid: centre (c+0.5, r+0.5) -> 2c+1, 2r+1
    verts = hull_vertices_bruteforce(np.stack([2 * c + 1, 2 * r + 1], axis=1))
    ordered = sorted(verts, key=lambda p: math.atan2(p[1] - 2 * r.mean() - 1,
                                                     p[0] - 2 * c.mean() - 1))
    ref = halfplane_raster(np.asarray(ordered, float) / 2.0, 12, 12)
    assert np.array_equal(got, ref)
    assert got[5, 5] and not got[8, 8]


def test_extent_mismatch_raises():
    with pytest.raises(ValueError, match="extent"):
        convex_target(np.ones((4, 4), bool), [np.ones((5, 4), bool)])


@given(st.integers(0, 2**31 - 1))
def test_target_contains_intersections(seed):
    r = np.random.default_rng(seed)
    pred = r.random((14, 14)) < 0.6
    insts = [_rect(14, 14, *sorted(r.integers(0, 15, 2)), *sorted(r.integers(0, 15, 2)))
             for _ in range(2)]
    tgt = convex_target(pred, insts)
    for inst in insts:
        assert not (pred & inst & ~tgt).any()


def test_gt_instance_mode_uses_full_instance():
    inst = _rect(8, 8, 1, 4, 1, 4)
    t = convex_targets(np.zeros((8, 8), int), {2: [inst]}, [2], mode="gt-instance")
    assert np.array_equal(t[2], inst)


def test_all_targets_empty_is_zero():
    logits = Tensor(np.zeros((3, 6, 6)))
    assert convex_loss(logits, None, {1: [], 2: []}, [1, 2]).item() == 0.0


def test_perfect_prediction_is_zero():
    logits = np.full((3, 6, 6), -50.0)
    logits[0] = 50.0
    logits[1, 1:4, 1:4] = 100.0
    inst = _rect(6, 6, 1, 4, 1, 4)
    assert convex_loss(Tensor(logits), None, {1: [inst]}, [1]).item() < 1e-12


def test_single_pixel_uniform_is_ln_c_over_classes():
    tgt = np.zeros((5, 5), bool)
    tgt[2, 3] = True
    targets = {1: tgt, 2: np.zeros((5, 5), bool), 3: np.zeros((5, 5), bool)}
    loss = convex_loss(Tensor(np.zeros((4, 5, 5))), None, {}, [1, 2, 3], targets=targets)
    assert loss.item() == pytest.approx(math.log(4.0) / 3, abs=1e-9)


def test_gt_label_source():
    tgt = np.zeros((4, 4), bool)
    tgt[1, 1] = True
    gt = np.zeros((4, 4), int)
    logits = np.zeros((2, 4, 4))
    logits[1] = 3.0
    a = convex_loss(Tensor(logits), gt, {}, [1], label_source="class", targets={1: tgt})
    b = convex_loss(Tensor(logits), gt, {}, [1], label_source="gt", targets={1: tgt})
    assert a.item() == pytest.approx(math.log1p(math.exp(-3.0)))
    assert b.item() == pytest.approx(math.log1p(math.exp(3.0)))


def test_convex_loss_gradient(rng):
    inst = _rect(6, 6, 1, 5, 1, 4)
    logits = rng.normal(size=(3, 6, 6))
    targets = convex_targets(np.argmax(logits, axis=0), {1: [inst], 2: [inst]}, [1, 2])
    f = lambda z: convex_loss(z, None, {}, [1, 2], targets=targets)
    assert grad_check(f, logits) < 1e-4


@given(st.integers(0, 2**31 - 1))
def test_convex_loss_non_negative(seed):
    r = np.random.default_rng(seed)
    inst = _rect(6, 6, 0, 4, 1, 5)
    assert convex_loss(Tensor(r.normal(size=(3, 6, 6)) * 3), None, {1: [inst]}, [1]).item() >= 0
