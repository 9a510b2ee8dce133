"""Loss terms of the adversarial-paced objective.

Pixel losses sum over the last two (spatial) dimensions and average over any
leading batch dimensions. Probabilities are clamped to [eps, 1 - eps] inside
the logs only.

Sign conventions:

* ``pace_adversarial_loss`` is the GSM objective; the GSM step *ascends* it.
* ``predictor_adversarial_loss`` is its predictor-dependent part; the
  predictor step *descends* it (scaled by beta), pushing predictions to look
  annotated.
* ``pixel_weight_loss`` is descended by the PW branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.01
    eta: float = 0.7
    eps: float = EPS

    def __post_init__(self):
        if self.beta < 0 or self.eta < 0:
            raise ValueError("beta and eta must be nonnegative")
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")


def gamma_sum(x: torch.Tensor) -> torch.Tensor:
    """Sum over the spatial dims, mean over leading batch dims."""
    s = x.sum(dim=(-2, -1))
    return s.mean() if s.dim() else s


def _batch_sum(x: torch.Tensor) -> torch.Tensor:
    # per-item totals (scalars stay scalars, maps are summed), averaged over the batch
    return x.reshape(x.shape[0], -1).sum(dim=1).mean()


def _check_same(*ts):
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def bce_map(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-pixel binary cross-entropy with clamped probabilities."""
    p = pred.clamp(eps, 1 - eps)
    return -((1 - target) * torch.log(1 - p) + target * torch.log(p))


def labeled_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    _check_same(pred, gt)
    return gamma_sum(bce_map(pred, gt, eps))


def unlabeled_loss(pred: torch.Tensor, pseudo: torch.Tensor, weight: torch.Tensor,
                   eps: float = EPS) -> torch.Tensor:
    """Reliability-weighted cross-entropy against pseudo-labels."""
    _check_same(pred, pseudo, weight)
    if weight.requires_grad or pseudo.requires_grad:
        raise ValueError("pseudo-labels and reliability weights must be constants")
    return gamma_sum(weight * bce_map(pred, pseudo, eps))


def reliability_target(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_same(pred, gt)
    return 1 - (pred - gt).abs()


def pace_adversarial_loss(real_gt: torch.Tensor, real_pred_l: torch.Tensor,
                          real_pred_u: torch.Tensor | None = None, eta: float = 0.7,
                          eps: float = EPS) -> torch.Tensor:
    """log P(gt) + log(1 - P(pred_l)) + eta * log(1 - P(pred_u)).

    Inputs are "annotated" probabilities, one per item (B,) for the GSM branch
    or one per pixel (B×H×W) for a pixel discriminator. Maximized by the
    discriminator.
    """
    if real_gt is None or real_gt.numel() == 0:
        raise ValueError("adversarial pace loss needs at least one labeled item")
    total = _batch_sum(torch.log(real_gt.clamp(eps, 1 - eps)))
    total = total + _batch_sum(torch.log(1 - real_pred_l.clamp(eps, 1 - eps)))
    if real_pred_u is not None and real_pred_u.numel() and eta:
        total = total + eta * _batch_sum(torch.log(1 - real_pred_u.clamp(eps, 1 - eps)))
    return total


def predictor_adversarial_loss(real_pred_l: torch.Tensor, real_pred_u: torch.Tensor | None = None,
                               eta: float = 0.7, eps: float = EPS,
                               non_saturating: bool = False) -> torch.Tensor:
    """Predictor-dependent part of the pace loss, to be minimized.

    The default keeps the ``log(1 - P)`` form; ``non_saturating`` swaps in
    ``-log P``.
    """
    def term(p):
        p = p.clamp(eps, 1 - eps)
        return _batch_sum(-torch.log(p) if non_saturating else torch.log(1 - p))

    total = term(real_pred_l)
    if real_pred_u is not None and real_pred_u.numel() and eta:
        total = total + eta * term(real_pred_u)
    return total


def pixel_weight_loss(pw_out: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Soft-target cross-entropy between the PW map and the reliability target."""
    _check_same(pw_out, target)
    return gamma_sum(bce_map(pw_out, target, eps))


def total_predictor_objective(loss_l: torch.Tensor, loss_u=None, adversarial=None,
                              loss_pw=None, beta: float = 0.01) -> torch.Tensor:
    """loss_l + loss_u + beta * (adversarial + loss_pw); missing terms drop out.

    ``adversarial`` is :func:`predictor_adversarial_loss` (depends on the
    predictor only) and ``loss_pw`` is :func:`pixel_weight_loss` (depends on
    the PW branch only), so one backward pass serves the joint descent step.
    """
    total = loss_l
    if loss_u is not None:
        total = total + loss_u
    if adversarial is not None:
        total = total + beta * adversarial
    if loss_pw is not None:
        total = total + beta * loss_pw
    return total
