"""Set-prediction matching: per-pair costs and the Hungarian assignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from ..errors import ContractViolation


@dataclass(frozen=True)
class LossWeights:
    class_: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1

    def __post_init__(self):
        if min(self.class_, self.bce, self.dice, self.no_object) < 0:
            raise ContractViolation(f"loss weights must be nonnegative: {self}")


@dataclass
class MatchResult:
    pairs: list  # (query, gt) sorted by query
    unmatched: list
    cost: float


def dice_loss(prob, target):
    """Smoothed dice, 1 in numerator and denominator. Works row-wise on the last axis."""
    inter = (prob * target).sum(-1)
    return 1 - (2 * inter + 1) / (prob.sum(-1) + target.sum(-1) + 1)


def pair_cost_matrix(class_logits, mask_logits, gt_classes, gt_masks, weights=LossWeights()):
    """Q x G costs. ``gt_masks`` is G x T float {0, 1}."""
    logp = F.log_softmax(class_logits, dim=-1)  # Q x (K+1)
    cost_class = -logp[:, gt_classes]
    t = mask_logits.shape[1]
    # mean BCE via the logit form: softplus(x) - x*g
    pos = F.softplus(-mask_logits)
    neg = F.softplus(mask_logits)
    cost_bce = (pos @ gt_masks.T + neg @ (1 - gt_masks).T) / t
    p = torch.sigmoid(mask_logits)
    inter = p @ gt_masks.T
    cost_dice = 1 - (2 * inter + 1) / (p.sum(1)[:, None] + gt_masks.sum(1)[None, :] + 1)
    return weights.class_ * cost_class + weights.bce * cost_bce + weights.dice * cost_dice


def pair_cost(class_logits, mask_logits, gt_class, gt_mask, weights=LossWeights()):
    return pair_cost_matrix(class_logits[None], mask_logits[None], torch.as_tensor([gt_class]), gt_mask[None], weights)[0, 0]


def hungarian_match(cost) -> MatchResult:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractViolation(f"cost matrix must be 2D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ContractViolation("cost matrix has non-finite entries")
    q, g = cost.shape
    if q == 0 or g == 0:
        return MatchResult([], list(range(q)), 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {r for r, _ in pairs}
    return MatchResult(pairs, [i for i in range(q) if i not in matched], float(cost[rows, cols].sum()))
