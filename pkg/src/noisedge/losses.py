"""Soft Dice loss and the region/edge composite."""
from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tensor

EPSILON = 1.0


def _check_pair(pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and target shapes differ: {pred.shape} vs {gt.shape}")
    g = gt.data
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("target mask must be binary (values 0 or 1)")
    p = pred.data
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("predictions must be probabilities in [0, 1]")


def dice_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps), eps = 1.

    The squared denominator and the additive eps make the empty-vs-empty
    case come out at exactly zero loss.
    """
    _check_pair(pred, gt)
    inter = ops.sum_all(ops.mul(pred, gt))
    denom = ops.add(ops.sum_all(ops.mul(pred, pred)), ops.sum_all(ops.mul(gt, gt)))
    ratio = ops.div(ops.add(ops.mul(inter, 2.0), EPSILON), ops.add(denom, EPSILON))
    return ops.sub(1.0, ratio)


def combined_loss(mask_pred: Tensor, mask_gt: Tensor, edge_pred: Tensor | None,
                  edge_gt: Tensor | None, alpha: float = 0.3):
    """alpha-weighted region/edge Dice; returns (total, region, edge) scalars.

    Without an edge prediction the total is the region loss alone (the
    alpha weighting only makes sense with both terms present).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    region = dice_loss(mask_pred, mask_gt)
    if edge_pred is None:
        return region, region, None
    if edge_gt is None:
        raise ValueError("edge prediction given without an edge target")
    edge = dice_loss(edge_pred, edge_gt)
    total = ops.add(ops.mul(region, alpha), ops.mul(edge, 1.0 - alpha))
    return total, region, edge
