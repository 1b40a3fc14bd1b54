import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from facade_rcnn.estimator import FacadeParser, TrainingDivergedError
from facade_rcnn.synth import SceneParams, generate_dataset

SMALL = dict(widths=(4, 4, 8, 8), epochs=1, batch_size=2, dtype="float64")


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SceneParams(seed=11, height=32, width=32), 4)


@pytest.fixture(scope="module")
def fitted(data):
    return FacadeParser(**{**SMALL, "epochs": 2}).fit(data[:3], eval_set=data[3:])


def test_get_params_and_clone():
    est = FacadeParser(alpha=0.25, transconv_flip=True)
    p = est.get_params()
    assert p["alpha"] == 0.25 and p["transconv_flip"] is True
    c = clone(est)
    assert c.get_params() == p and c is not est


def test_not_fitted(data):
    with pytest.raises(NotFittedError):
        FacadeParser().predict(data[:1])


def test_one_epoch_one_record(data, tmp_path):
    log = tmp_path / "log.jsonl"
    est = FacadeParser(**SMALL).fit(data[:1], log_path=log)
    lines = log.read_text().splitlines()
    assert len(lines) == 1 and len(est.history_) == 1
    rec = json.loads(lines[0])
    assert rec["epoch"] == 1 and rec["steps"] == 1
    assert rec["total"] == pytest.approx(rec["semantic"] + rec["proposal"] + rec["detection"]
                                         + rec["alpha"] * rec["cvx"], abs=1e-9)


def test_history_has_eval_metrics(fitted):
    assert [r["epoch"] for r in fitted.history_] == [1, 2]
    assert all(0 <= r["miou"] <= 1 for r in fitted.history_)


def test_prediction_shapes(fitted, data):
    sem = fitted.predict_semantic(data[:2])
    fused = fitted.predict(data[:2])
    proba = fitted.predict_proba(data[:2])
    assert all(m.shape == (32, 32) for m in sem + fused)
    assert proba[0].shape == (5, 32, 32)
    assert np.allclose(proba[0].sum(axis=0), 1.0)
    assert np.array_equal(np.argmax(proba[0], axis=0), sem[0])


def test_threshold_one_equals_semantic(fitted, data):
    assert np.array_equal(fitted.predict(data[:2], threshold=1.0)[1],
                          fitted.predict_semantic(data[:2])[1])


def test_evaluate_keys(fitted, data):
    rep = fitted.evaluate(data[3:], thresholds=[0.0, 0.5])
    assert set(rep["fused"]) == {"0.0", "0.5"} and rep["samples"] == 1
    assert rep["miou"] == rep["fused"]["0.0"]["miou"]
    assert fitted.score(data[3:]) == pytest.approx(
        fitted.evaluate(data[3:])["miou"])


def test_save_load_bitwise(fitted, data, tmp_path):
    path = fitted.save(tmp_path / "m.frcn")
    assert path.with_suffix(".cfg").is_file()
    back = FacadeParser.load(path)
    assert back.get_params() == fitted.get_params()
    a = json.dumps(fitted.evaluate(data[3:]), sort_keys=True)
    b = json.dumps(back.evaluate(data[3:]), sort_keys=True)
    assert a == b


def test_same_seed_same_history(data):
    a = FacadeParser(**SMALL).fit(data[:2])
    b = FacadeParser(**SMALL).fit(data[:2])
    assert a.history_ == b.history_


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(data):
    est = FacadeParser(**{**SMALL, "epochs": 5, "optimizer": "sgd", "learning_rate": 1e30})
    with pytest.raises(TrainingDivergedError) as info:
        est.fit(data[:2])
    assert info.value.epoch >= 1


@pytest.mark.parametrize("kw", [dict(optimizer="rmsprop"), dict(dtype="float16"),
                                dict(fuse_threshold=1.5), dict(batch_size=0)])
def test_bad_params(kw, data):
    with pytest.raises(ValueError):
        FacadeParser(**{**SMALL, **kw}).fit(data[:1])


def test_bad_image_size():
    est = FacadeParser(**SMALL).fit(generate_dataset(SceneParams(seed=1, height=16,
                                                                 width=16), 1))
    with pytest.raises(ValueError, match="multiple of 8"):
        est.predict_semantic(np.zeros((3, 12, 16)))
