"""Training loss: weighted soft Dice plus pixelwise cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    smooth_eps: float = 1.0

    def __post_init__(self):
        if self.lambda_dice < 0 or self.lambda_ce < 0 or self.lambda_dice + self.lambda_ce <= 0:
            raise ConfigError("loss weights must be nonnegative with a positive sum")
        if self.smooth_eps <= 0:
            raise ConfigError("smooth_eps must be positive")


def _gt_array(gt, shape) -> np.ndarray:
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if g.shape != tuple(shape):
        raise DimensionError(f"ground truth {g.shape} vs prediction {tuple(shape)}")
    return g.astype(T.default_dtype())


def dice_loss(pred_prob: Tensor, gt, eps: float = 1.0) -> Tensor:
    """1 - (2 sum(p g) + eps) / (sum p + sum g + eps), averaged over the batch."""
    p = T.as_tensor(pred_prob)
    if p.ndim != 3:
        raise DimensionError(f"dice_loss expects [B, S, S], got {p.shape}")
    if np.any(p.data < 0) or np.any(p.data > 1):
        raise ContractError("dice_loss probabilities must lie in [0, 1]")
    g = _gt_array(gt, p.shape)
    axes = (1, 2)
    inter = T.tsum(p * g, axes)
    denom = T.tsum(p, axes) + g.sum(axis=axes) + eps
    return T.mean(1.0 - (inter * 2.0 + eps) / denom)


def ce_loss(logits: Tensor, gt) -> Tensor:
    """Mean over pixels of -log softmax(logits)[true class]."""
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise DimensionError(f"ce_loss expects [B, 2, S, S], got {logits.shape}")
    B, _, H, W = logits.shape
    g = _gt_array(gt, (B, H, W))
    logp = T.log_softmax(logits, axis=1)
    picked = logp[:, 0] * (1.0 - g) + logp[:, 1] * g
    return -T.mean(picked)


def foreground_prob(logits: Tensor) -> Tensor:
    return T.softmax(logits, axis=1)[:, 1]


def combined_loss(logits: Tensor, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """lambda_dice * Dice(softmax foreground, gt) + lambda_ce * CE(logits, gt)."""
    total = None
    if cfg.lambda_dice:
        total = dice_loss(foreground_prob(logits), gt, cfg.smooth_eps) * cfg.lambda_dice
    if cfg.lambda_ce:
        term = ce_loss(logits, gt) * cfg.lambda_ce
        total = term if total is None else total + term
    return total
