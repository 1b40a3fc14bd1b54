import logging
import shutil
from pathlib import Path

import numpy as np
import pytest

from facade_rcnn.dataset import (DatasetError, load_dataset, load_sample, read_class_names,
                                 save_sample, write_dataset)
from facade_rcnn.synth import CLASS_NAMES, SceneParams, generate_dataset

FIXTURE = Path(__file__).parent / "fixtures" / "facade8"
WINDOW = CLASS_NAMES.index("window")


def _same(a, b):
    assert np.array_equal(a.image, b.image) and a.image.dtype == b.image.dtype
    assert np.array_equal(a.semantic, b.semantic)
    assert sorted(a.instances) == sorted(b.instances)
    for cls in a.instances:
        assert len(a.instances[cls]) == len(b.instances[cls])
        for ma, mb in zip(a.instances[cls], b.instances[cls]):
            assert np.array_equal(ma, mb)
        assert a.corners[cls] == b.corners[cls]


def test_fixture_loads_to_nine_pixel_window():
    s = load_sample(FIXTURE, "f0")
    assert s.image.shape == (3, 8, 8) and s.semantic.shape == (8, 8)
    (mask,) = s.instances[WINDOW]
    expected = np.zeros((8, 8), bool)
    expected[2:5, 2:5] = True
    assert np.array_equal(mask, expected) and mask.sum() == 9
    assert s.corners[WINDOW][0] == ((2.0, 2.0), (5.0, 2.0), (2.0, 5.0), (5.0, 5.0))


def test_short_polygon_skipped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        s = load_sample(FIXTURE, "f0")
    assert len(s.instances[WINDOW]) == 1
    assert "fewer than 3 points" in caplog.text


def test_fixture_round_trip_is_bitwise(tmp_path):
    a = load_sample(FIXTURE, "f0")
    save_sample(a, tmp_path)
    _same(a, load_sample(tmp_path, "f0", CLASS_NAMES))


def test_synthetic_round_trip(tmp_path):
    data = generate_dataset(SceneParams(seed=5, height=48, width=48), 3)
    write_dataset(data, tmp_path, train_fraction=2 / 3)
    train, test = load_dataset(tmp_path, "train"), load_dataset(tmp_path, "test")
    assert [s.sample_id for s in train + test] == ["00000", "00001", "00002"]
    for orig, back in zip(data, train + test):
        assert np.array_equal(orig.image, back.image)
        assert np.array_equal(orig.semantic, back.semantic)
        for cls, masks in back.instances.items():
            for m in masks:
                assert not (m & (back.semantic != cls)).any()


def test_empty_split():
    assert load_dataset(FIXTURE, "test") == []


def test_missing_file(tmp_path):
    shutil.copytree(FIXTURE, tmp_path / "d")
    (tmp_path / "d" / "semantic" / "f0.png").unlink()
    with pytest.raises(DatasetError, match="missing file"):
        load_sample(tmp_path / "d", "f0")


def test_missing_split(tmp_path):
    with pytest.raises(DatasetError, match="split"):
        load_dataset(tmp_path, "train")


def test_class_names_default(tmp_path):
    assert read_class_names(tmp_path) == list(CLASS_NAMES)
    assert read_class_names(FIXTURE) == list(CLASS_NAMES)
