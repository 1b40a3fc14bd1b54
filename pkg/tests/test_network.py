import math

import numpy as np
import pytest

from facade_rcnn.network import FacadeRCNN, ModelConfig, total_loss
from facade_rcnn.synth import LabeledSample
from facade_rcnn.tensor import Tensor, grad_check, no_grad

TINY = dict(n_classes=2, widths=(2, 2, 2, 2), convex_classes=(1,), detection=False)


def _block_sample():
    sem = np.zeros((8, 8), np.uint8)
    sem[2:5, 2:5] = 1
    inst = sem.astype(bool)
    return LabeledSample(np.zeros((3, 8, 8)), sem, {1: [inst]}, {}, "fixture")


def _block_logits():
    z = np.zeros((1, 2, 8, 8))
    z[0, 1, 2:5, 2:5] = 2.0
    return z


def test_logit_shape_matches_input():
    model = FacadeRCNN(ModelConfig(n_classes=5, widths=(4, 4, 4, 4)))
    out = model.forward(np.zeros((2, 3, 16, 24)))
    assert out["semantic"].shape == (2, 5, 16, 24)
    assert out["objectness"].shape[0] == 2 and out["rpn_deltas"].shape[-1] == 4


def test_same_seed_same_weights():
    a, b = FacadeRCNN(ModelConfig(**TINY)), FacadeRCNN(ModelConfig(**TINY))
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and np.array_equal(pa, pb)


def test_detection_branch_leaves_semantics_untouched(rng):
    img = rng.random((1, 3, 16, 16))
    model = FacadeRCNN(ModelConfig(n_classes=3, widths=(4, 4, 4, 4), convex_classes=(2,))).eval()
    with no_grad():
        with_det = model.forward(img)["semantic"].data
        without = model.forward(img, with_detection=False)["semantic"].data
    assert np.array_equal(with_det, without)


def test_size_not_multiple_of_stride():
    model = FacadeRCNN(ModelConfig(**TINY))
    with pytest.raises(ValueError, match="multiple of 8"):
        model.forward(np.zeros((1, 3, 12, 16)))


def test_alpha_default_and_validation():
    assert ModelConfig().alpha == pytest.approx(1 / 9)
    with pytest.raises(ValueError):
        ModelConfig(alpha=-0.1)


def test_total_loss_hand_fixture():
    model = FacadeRCNN(ModelConfig(**TINY))
    rep = total_loss(model, {"semantic": Tensor(_block_logits())}, [_block_sample()])
    l_sem = (9 * math.log1p(math.exp(-2)) + 55 * math.log(2)) / 64
    l_cvx = math.log1p(math.exp(-2))
    assert rep.semantic == pytest.approx(l_sem, abs=1e-12)
    assert rep.cvx == pytest.approx(l_cvx, abs=1e-12)
    assert rep.total == pytest.approx(l_sem + l_cvx / 9, abs=1e-12)
    assert rep.tensor.item() == pytest.approx(rep.total, abs=1e-12)


def test_alpha_zero_drops_convex_term():
    model = FacadeRCNN(ModelConfig(**{**TINY, "alpha": 0.0}))
    rep = total_loss(model, {"semantic": Tensor(_block_logits())}, [_block_sample()])
    assert rep.cvx == 0.0 and rep.total == rep.semantic


def test_identity_group_equals_plain_conv(rng):
    img = rng.random((1, 3, 16, 16))
    plain = FacadeRCNN(ModelConfig(**TINY)).eval()
    ident = FacadeRCNN(ModelConfig(**TINY, transconv_stages=(0, 1, 2))).eval()
    assert list(plain.state_dict()) == list(ident.state_dict())
    with no_grad():
        assert np.array_equal(plain.forward(img)["semantic"].data,
                              ident.forward(img)["semantic"].data)


def test_end_to_end_gradient(rng):
    cfg = ModelConfig(**TINY, transconv_angles=(150.0, 0.0, 30.0), transconv_flip=True)
    model = FacadeRCNN(cfg).eval()
    sample = _block_sample()
    img = rng.random((1, 3, 8, 8))

    def f(x):
        return total_loss(model, model.forward(x), [sample]).tensor

    assert grad_check(f, img) < 1e-3

    w = model.layers["backbone.0.conv1"]

    def g(kernel):
        w.weight = kernel
        return total_loss(model, model.forward(img), [sample]).tensor

    assert grad_check(g, w.weight.data.copy()) < 1e-3
