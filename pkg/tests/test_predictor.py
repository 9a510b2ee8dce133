import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from apl_seg.losses import labeled_loss
from apl_seg.predictor import (
    PredictorConfig, TaskPredictor, binarize, images_to_tensor, load_predictor, predict, save_predictor,
    to_uint8,
)

from conftest import finite_difference_check


def test_output_shape_and_range():
    model = TaskPredictor(PredictorConfig(image_size=32, width=8))
    out = model(torch.randn(3, 3, 32, 32) * 5)
    assert out.shape == (3, 32, 32)
    assert ((out > 0) & (out < 1)).all()


def test_rejects_wrong_input():
    model = TaskPredictor(PredictorConfig(image_size=32, width=8))
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 16, 16))
    with pytest.raises(ValueError):
        model(torch.zeros(1, 1, 32, 32))
    with pytest.raises(ValueError):
        PredictorConfig(backbone="vgg")


def test_same_seed_same_weights_and_global_rng_untouched():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = TaskPredictor(PredictorConfig(image_size=32, seed=4))
    after = torch.rand(1)
    b = TaskPredictor(PredictorConfig(image_size=32, seed=4))
    c = TaskPredictor(PredictorConfig(image_size=32, seed=5))
    assert torch.equal(before, after)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert not all(torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_predict_is_deterministic_and_restores_mode():
    model = TaskPredictor(PredictorConfig(image_size=32))
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    model.train()
    a, b = predict(model, img), predict(model, img)
    assert np.array_equal(a, b) and a.shape == (32, 32)
    assert model.training


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = TaskPredictor(PredictorConfig(image_size=16, width=4, depth=3)).double()
    x = torch.randn(2, 3, 16, 16, dtype=torch.float64)
    gt = (torch.rand(2, 16, 16, dtype=torch.float64) > 0.5).double()
    errs = finite_difference_check(lambda: labeled_loss(model(x), gt), list(model.parameters()))
    assert len(errs) >= 200
    assert errs.max() < 1e-3


def test_binarize_examples():
    s = np.array([[0.49, 0.51], [0.5, 0.1]])
    assert binarize(s).tolist() == [[0, 1], [1, 0]]
    t = torch.tensor(s)
    assert binarize(t).tolist() == [[0.0, 1.0], [1.0, 0.0]]
    with pytest.raises(ValueError):
        binarize(s, tau=1.5)


@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)), st.floats(0, 1))
@settings(max_examples=50)
def test_binarize_idempotent_and_binary(s, tau):
    b = binarize(s, tau)
    assert set(np.unique(b)) <= {0, 1}
    assert np.array_equal(binarize(b.astype(np.float64), 0.5), b)


def test_to_uint8():
    assert to_uint8(np.array([0.0, 0.5, 1.0, 1.2])).tolist() == [0, 128, 255, 255]


def test_images_to_tensor_layout():
    img = np.zeros((4, 6, 3), np.float32)
    img[..., 1] = 1
    t = images_to_tensor([img, img])
    assert t.shape == (2, 3, 4, 6) and t[:, 1].eq(1).all() and t[:, 0].eq(0).all()


def test_checkpoint_roundtrip(tmp_path):
    model = TaskPredictor(PredictorConfig(image_size=32, width=8, seed=3))
    path = tmp_path / "p.pt"
    save_predictor(model, path)
    back = load_predictor(path)
    x = torch.randn(1, 3, 32, 32)
    model.eval(), back.eval()
    assert torch.equal(model(x), back(x))
    assert back.cfg == model.cfg
