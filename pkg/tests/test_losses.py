import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from apl_seg import losses as L

T = lambda a: torch.tensor(a, dtype=torch.float64)  # noqa: E731


def test_labeled_loss_hand_values():
    gt = T([[1.0, 0.0], [0.0, 1.0]])
    assert L.labeled_loss(torch.full((2, 2), 0.5, dtype=torch.float64), gt).item() == pytest.approx(
        2.772588722239781, abs=1e-6)
    pred = T([[0.9, 0.1], [0.1, 0.9]])
    assert L.labeled_loss(pred, gt).item() == pytest.approx(0.4214420626313051, abs=1e-6)


def test_labeled_loss_perfect_prediction():
    gt = T([[1.0, 0.0], [0.0, 1.0]])
    assert 0 <= L.labeled_loss(gt.clone(), gt).item() <= 4 * 1e-6


def test_labeled_loss_shape_mismatch():
    with pytest.raises(ValueError):
        L.labeled_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_unlabeled_loss_hand_values():
    pred = torch.full((2, 2), 0.5, dtype=torch.float64)
    pseudo = T([[1.0, 1.0], [0.0, 0.0]])
    v = T([[1.0, 0.0], [0.0, 1.0]])
    assert L.unlabeled_loss(pred, pseudo, v).item() == pytest.approx(1.3862943611198906, abs=1e-6)
    assert L.unlabeled_loss(pred, pseudo, torch.zeros_like(v)).item() == 0.0


def test_unlabeled_loss_rejects_weights_with_gradient():
    pred = torch.rand(4, 4)
    w = torch.rand(4, 4, requires_grad=True)
    with pytest.raises(ValueError):
        L.unlabeled_loss(pred, (pred > 0.5).float(), w)


def test_unit_weights_reduce_to_labeled_loss():
    g = torch.Generator().manual_seed(0)
    pred = torch.rand(1000, 8, 8, generator=g, dtype=torch.float64)
    pseudo = (torch.rand(1000, 8, 8, generator=g, dtype=torch.float64) > 0.5).double()
    a = L.bce_map(pred, pseudo).sum(dim=(-2, -1))
    b = (torch.ones_like(pred) * L.bce_map(pred, pseudo)).sum(dim=(-2, -1))
    assert torch.equal(a, b)
    for i in range(0, 1000, 97):
        assert L.unlabeled_loss(pred[i], pseudo[i], torch.ones(8, 8, dtype=torch.float64)).item() == \
            L.labeled_loss(pred[i], pseudo[i]).item()


def test_reliability_target_cases():
    gt = T([[1.0, 0.0]])
    assert torch.equal(L.reliability_target(gt, gt), torch.ones_like(gt))
    assert torch.equal(L.reliability_target(1 - gt, gt), torch.zeros_like(gt))
    assert L.reliability_target(T([[0.7]]), T([[1.0]])).item() == pytest.approx(0.7)


unit = st.floats(0.0, 1.0, allow_nan=False)


@given(arrays(np.float64, (4, 4), elements=unit), arrays(np.uint8, (4, 4), elements=st.integers(0, 1)))
def test_reliability_target_properties(p, g):
    p, g = torch.from_numpy(p), torch.from_numpy(g.astype(np.float64))
    v = L.reliability_target(p, g)
    assert ((0 <= v) & (v <= 1)).all()
    assert torch.allclose(v + L.reliability_target(1 - p, g), torch.ones_like(v), atol=1e-12)


@given(arrays(np.float64, (3, 3), elements=unit), arrays(np.float64, (3, 3), elements=unit))
def test_losses_finite_on_closed_unit_interval(p, y):
    p, y = torch.from_numpy(p), torch.from_numpy(y)
    for val in (L.labeled_loss(p, (y > 0.5).double()), L.pixel_weight_loss(p, y),
                L.unlabeled_loss(p, (y > 0.5).double(), y)):
        assert math.isfinite(val.item())
        assert val.item() >= 0


def test_pace_adversarial_hand_value():
    half = torch.tensor([0.5], dtype=torch.float64)
    val = L.pace_adversarial_loss(half, half, half, eta=0.7)
    assert val.item() == pytest.approx(1.8714973875118524 * -1, abs=1e-6)


def test_pace_adversarial_eta_zero_ignores_unlabeled():
    real, fake = torch.tensor([0.8]), torch.tensor([0.3])
    a = L.pace_adversarial_loss(real, fake, torch.tensor([0.99]), eta=0.0)
    b = L.pace_adversarial_loss(real, fake, None)
    assert a.item() == b.item()


def test_pace_adversarial_monotone_in_real_score():
    fake = torch.tensor([0.3])
    vals = [L.pace_adversarial_loss(torch.tensor([p]), fake).item() for p in (0.1, 0.4, 0.7, 0.95)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_pace_adversarial_supremum_at_perfect_discriminator():
    eps = L.EPS
    best = L.pace_adversarial_loss(torch.tensor([1.0], dtype=torch.float64),
                                   torch.tensor([0.0], dtype=torch.float64),
                                   torch.tensor([0.0], dtype=torch.float64)).item()
    assert best == pytest.approx(2.7 * math.log(1 - eps), rel=1e-9)
    other = L.pace_adversarial_loss(torch.tensor([0.9]), torch.tensor([0.2]), torch.tensor([0.1])).item()
    assert other < best


def test_pace_adversarial_needs_labeled():
    with pytest.raises(ValueError):
        L.pace_adversarial_loss(torch.tensor([]), torch.tensor([]))


def test_pixel_weight_loss_values():
    v = T([[1.0, 0.0]])
    assert L.pixel_weight_loss(v.clone(), v).item() < 1e-5
    assert L.pixel_weight_loss(T([[0.5]]), T([[0.5]])).item() == pytest.approx(0.6931471805599453, abs=1e-6)


def test_pixel_weight_loss_gradient_vanishes_at_target():
    target = T([[0.2, 0.6], [0.35, 0.9]])
    out = target.clone().requires_grad_(True)
    L.pixel_weight_loss(out, target).backward()
    assert out.grad.abs().max().item() < 1e-9


@given(arrays(np.float64, (3, 3), elements=st.floats(0.01, 0.99)),
       arrays(np.float64, (3, 3), elements=st.floats(0.01, 0.99)))
@settings(max_examples=50)
def test_pixel_weight_loss_entropy_bound(out, target):
    out, target = torch.from_numpy(out), torch.from_numpy(target)
    entropy = -(target * torch.log(target) + (1 - target) * torch.log(1 - target)).sum()
    assert L.pixel_weight_loss(out, target).item() >= entropy.item() - 1e-9
    assert L.pixel_weight_loss(target, target).item() == pytest.approx(entropy.item(), abs=1e-9)


def test_total_objective_reductions():
    ll, lu, adv, lpw = (torch.tensor(x, dtype=torch.float64) for x in (1.5, 0.25, -0.7, 3.0))
    assert L.total_predictor_objective(ll, lu, adv, lpw, beta=0.0).item() == (ll + lu).item()
    assert L.total_predictor_objective(ll, None, adv, None, beta=0.01).item() == pytest.approx(1.5 - 0.007)


def test_total_objective_hand_assembled_2x2():
    pred_l = T([[0.9, 0.1], [0.1, 0.9]])
    gt = T([[1.0, 0.0], [0.0, 1.0]])
    pred_u = torch.full((2, 2), 0.5, dtype=torch.float64)
    pseudo = T([[1.0, 1.0], [0.0, 0.0]])
    v = T([[1.0, 0.0], [0.0, 1.0]])
    p_fake_l, p_fake_u = torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.25], dtype=torch.float64)
    pw_out = torch.full((2, 2), 0.5, dtype=torch.float64)
    beta, eta = 0.01, 0.7

    total = L.total_predictor_objective(
        L.labeled_loss(pred_l, gt), L.unlabeled_loss(pred_u, pseudo, v),
        L.predictor_adversarial_loss(p_fake_l, p_fake_u, eta=eta),
        L.pixel_weight_loss(pw_out, L.reliability_target(pred_l, gt)), beta)

    # independent recomputation, term by term
    ll = -4 * math.log(0.9)
    lu = 2 * math.log(2)
    adv = math.log(1 - 0.5) + eta * math.log(1 - 0.25)
    vstar = [0.9, 0.9, 0.9, 0.9]
    lpw = -sum((1 - t) * math.log(0.5) + t * math.log(0.5) for t in vstar)
    assert total.item() == pytest.approx(ll + lu + beta * (adv + lpw), abs=1e-9)


def test_non_saturating_variant():
    p = torch.tensor([0.25], dtype=torch.float64)
    assert L.predictor_adversarial_loss(p, non_saturating=True).item() == pytest.approx(-math.log(0.25))
    assert L.predictor_adversarial_loss(p).item() == pytest.approx(math.log(0.75))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        L.LossConfig(beta=-1)
    with pytest.raises(ValueError):
        L.LossConfig(eps=0.6)
    assert L.LossConfig().beta == 0.01 and L.LossConfig().eta == 0.7
