"""Classical self-paced weighting rules, used as drop-in replacements for the
learned reliability map.

Each rule is the closed-form minimizer over v in [0, 1] of

    sum_i v_i * l_i + R(v; lam)

for the scheme's regularizer R:

=============  ==========================================================
hard_l1        R = -lam * sum v
linear_soft    R = lam * sum (v^2 / 2 - v)
l21_group      R = -lam * sum v - g * sum_groups ||v_g||_2
l_half_group   R = -lam * sum v + (g / n_g) * sum_groups (sum_i sqrt(v_i))^2
fraction       R = -z * sum log(v + z / lam),  z = lam * lo / (lam - lo)
=============  ==========================================================

with ``g = gamma_ratio * lam`` and ``lo = lower_ratio * lam``. Group variants
treat every image as one group. The ``l21`` rule favors spreading selection
across groups (rank-dependent bonus ``g / (sqrt(i) + sqrt(i-1))``), the
``l_half`` rule caps how much of one group is selected (rank-dependent
penalty ``g * (2i - 1) / n_g``). Both group objectives are concave in v, so
their minimizers are binary.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

KINDS = ("hard_l1", "linear_soft", "l_half_group", "l21_group", "fraction")
GROUP_KINDS = ("l_half_group", "l21_group")


@dataclass(frozen=True)
class SplScheme:
    kind: str
    lam: float
    growth: float = 1.1
    gamma_ratio: float = 0.25
    lower_ratio: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown SPL scheme {self.kind!r}; choose from {KINDS}")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.growth < 1:
            raise ValueError("growth must be >= 1")
        if not 0 < self.lower_ratio < 1:
            raise ValueError("lower_ratio must lie in (0, 1)")
        if self.gamma_ratio < 0:
            raise ValueError("gamma_ratio must be nonnegative")

    def grown(self) -> "SplScheme":
        return replace(self, lam=self.lam * self.growth)


def _check_loss(loss):
    loss = np.asarray(loss, dtype=np.float64)
    if (loss < 0).any():
        raise ValueError("losses must be nonnegative")
    return loss


def _group_thresholds(n: int, scheme: SplScheme) -> np.ndarray:
    rank = np.arange(1, n + 1, dtype=np.float64)
    g = scheme.gamma_ratio * scheme.lam
    if scheme.kind == "l21_group":
        return scheme.lam + g / (np.sqrt(rank) + np.sqrt(rank - 1))
    return scheme.lam - g * (2 * rank - 1) / n


def spl_weight(loss, scheme: SplScheme) -> np.ndarray:
    """Per-element weight; group schemes see each element as its own group."""
    loss = _check_loss(loss)
    lam = scheme.lam
    if scheme.kind == "hard_l1":
        return (loss < lam).astype(np.float64)
    if scheme.kind == "linear_soft":
        return np.maximum(0.0, 1.0 - loss / lam)
    if scheme.kind == "fraction":
        lo = scheme.lower_ratio * lam
        z = lam * lo / (lam - lo)
        with np.errstate(divide="ignore", over="ignore"):
            v = z / loss - z / lam
        return np.clip(np.where(loss <= lo, 1.0, v), 0.0, 1.0)
    return (loss < _group_thresholds(1, scheme)[0]).astype(np.float64)


def group_weight(losses, scheme: SplScheme) -> np.ndarray:
    """Closed-form weights for one group: select the longest prefix of the
    loss-sorted elements whose rank-dependent threshold is still met."""
    losses = _check_loss(losses)
    flat = losses.ravel()
    order = np.argsort(flat, kind="stable")
    keep = flat[order] < _group_thresholds(flat.size, scheme)
    # thresholds fall with rank while sorted losses rise, so `keep` is a prefix
    v = np.zeros(flat.size)
    v[order] = keep
    return v.reshape(losses.shape)


def spl_pace_step(losses, scheme: SplScheme) -> np.ndarray:
    """Reliability map from per-pixel losses (H×W or B×H×W)."""
    losses = _check_loss(losses)
    if scheme.kind not in GROUP_KINDS:
        return spl_weight(losses, scheme)
    if losses.ndim == 2:
        return group_weight(losses, scheme)
    return np.stack([group_weight(l, scheme) for l in losses])


def initial_lambda(losses) -> float:
    """lam under which the median loss gets weight 0.5 with linear_soft."""
    med = float(np.median(_check_loss(losses)))
    return max(2.0 * med, 1e-6)
