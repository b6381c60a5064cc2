"""Training losses: increment MSE, cross-entropy, soft Dice and their blend."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

LOG_CLAMP = 1e-12
DICE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _check_one_hot(target: Tensor) -> None:
    y = target.data
    if y.ndim < 1 or y.shape[0] < 2:
        raise ContractError("target needs at least two class channels")
    if not np.isin(y, (0.0, 1.0)).all() or not np.all(y.sum(axis=0) == 1.0):
        raise ContractError("target is not one-hot along the channel axis")


def mse_loss(pred_noise: Tensor, true_noise: Tensor) -> Tensor:
    _same_shape(pred_noise, true_noise, "mse_loss")
    return tc.mean(tc.square(pred_noise - true_noise))


def ce_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Mean per-pixel cross-entropy of channel-softmaxed logits (C×H×W)."""
    _same_shape(logits, target, "ce_loss")
    _check_one_hot(target)
    probs = tc.softmax_axis(logits, 0)
    logp = tc.log(tc.clamp_min(probs, LOG_CLAMP))
    n_pix = math.prod(logits.shape[1:])
    return -tc.tsum(target * logp) * (1.0 / n_pix)


def dice_loss(probs: Tensor, target: Tensor, eps: float = DICE_EPS) -> Tensor:
    """1 minus the class-averaged soft Dice with squared denominators."""
    _same_shape(probs, target, "dice_loss")
    p = probs.data
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ContractError("probabilities must lie in [0, 1]")
    c = probs.shape[0]
    flat_p = tc.reshape(probs, (c, -1))
    flat_y = tc.reshape(target, (c, -1))
    inter = tc.tsum(flat_p * flat_y, axis=1)
    denom = tc.tsum(tc.square(flat_p), axis=1) + tc.tsum(tc.square(flat_y), axis=1) + eps
    return 1.0 - tc.mean(2.0 * inter / denom)


def composite_loss(
    pred_noise: Tensor,
    true_noise: Tensor,
    logits: Tensor,
    target: Tensor,
    w: LossWeights = LossWeights(),
) -> Tensor:
    total, _ = composite_loss_parts(pred_noise, true_noise, logits, target, w)
    return total


def composite_loss_parts(pred_noise, true_noise, logits, target, w: LossWeights = LossWeights()):
    """Composite loss plus the float value of each component."""
    mse = mse_loss(pred_noise, true_noise)
    ce = ce_loss(logits, target)
    dice = dice_loss(tc.softmax_axis(logits, 0), target)
    total = mse + w.lam * ce + (1.0 - w.lam) * dice
    parts = {"mse": mse.item(), "ce": ce.item(), "dice": dice.item(), "total": total.item()}
    return total, parts


def blend(mse: float, ce: float, dice: float, w: LossWeights = LossWeights()) -> float:
    """The composite weighting applied to already-computed components."""
    return mse + w.lam * ce + (1.0 - w.lam) * dice
