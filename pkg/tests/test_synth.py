import math

import numpy as np
import pytest

from facade_rcnn.geometry import quad_polygon, rasterize_convex_polygon
from facade_rcnn.synth import (CONVEX_CLASS_NAMES, CLASS_NAMES, IGNORE_INDEX, SceneParams,
                               generate_dataset, generate_scene)

WINDOW = CLASS_NAMES.index("window")


def test_same_seed_same_scene():
    a = generate_scene(SceneParams(seed=7))
    b = generate_scene(SceneParams(seed=7))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.semantic, b.semantic)
    c = generate_scene(SceneParams(seed=8))
    assert not np.array_equal(a.image, c.image)


def test_dataset_ids_and_count():
    data = generate_dataset(SceneParams(seed=1, height=48, width=48), 4)
    assert [s.sample_id for s in data] == ["00000", "00001", "00002", "00003"]
    assert all(s.image.shape == (3, 48, 48) for s in data)


@pytest.mark.parametrize("seed", range(5))
def test_no_shear_no_decay_gives_axis_aligned_windows(seed):
    s = generate_scene(SceneParams(seed=seed, shear_range=(0.0, 0.0), decay=1.0,
                                   occluders=(0, 0)))
    for tl, tr, bl, br in s.corners[WINDOW]:
        assert tl[1] == pytest.approx(tr[1]) and bl[1] == pytest.approx(br[1])
        assert tl[0] == pytest.approx(bl[0]) and tr[0] == pytest.approx(br[0])


@pytest.mark.parametrize("seed", range(5))
def test_window_count_is_grid_minus_skipped(seed):
    p = SceneParams(seed=seed)
    s = generate_scene(p)
    assert len(s.instances.get(WINDOW, [])) == p.facades * p.rows * p.cols - s.skipped


@pytest.mark.parametrize("seed", range(5))
def test_window_labels_equal_union_of_instances(seed):
    s = generate_scene(SceneParams(seed=seed))
    union = np.zeros_like(s.semantic, dtype=bool)
    for m in s.instances.get(WINDOW, []):
        union |= m
    assert np.array_equal(union, s.semantic == WINDOW)


@pytest.mark.parametrize("phi", [-30.0, -10.0, 15.0, 35.0])
def test_top_edge_slope_is_tan_phi(phi):
    s = generate_scene(SceneParams(seed=3, facades=1, shear_range=(phi, phi), decay=1.0))
    for tl, tr, _, _ in s.corners[WINDOW]:
        slope = (tr[1] - tl[1]) / (tr[0] - tl[0])
        assert abs(slope) == pytest.approx(abs(math.tan(math.radians(phi))), abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_labels_in_range(seed):
    s = generate_scene(SceneParams(seed=seed))
    vals = set(np.unique(s.semantic)) - {IGNORE_INDEX}
    assert vals <= set(range(len(CLASS_NAMES)))
    assert np.all((s.image >= 0) & (s.image <= 1))


@pytest.mark.parametrize("seed", range(5))
def test_instance_masks_cover_their_quads(seed):
    s = generate_scene(SceneParams(seed=seed, occluders=(0, 0)))
    for cls, quads in s.corners.items():
        for quad, mask in zip(quads, s.instances[cls]):
            ref = rasterize_convex_polygon(quad_polygon(quad), s.width, s.height)
            assert (mask & ref).sum() >= 0.9 * ref.sum()


def test_binary_palette():
    s = generate_scene(SceneParams(seed=0, palette="binary"))
    assert set(np.unique(s.semantic)) <= {0, 1, IGNORE_INDEX}


@pytest.mark.parametrize("kw", [dict(shear_range=(-70.0, 0.0)), dict(decay=0.0),
                                dict(facades=3), dict(palette="rgb"), dict(rows=0)])
def test_bad_params(kw):
    with pytest.raises(ValueError):
        SceneParams(**kw)


def test_convex_class_names_are_labels():
    assert set(CONVEX_CLASS_NAMES) <= set(CLASS_NAMES)
