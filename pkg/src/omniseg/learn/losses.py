"""Matched set losses with deep supervision over refinement rounds."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .matching import LossWeights, MatchResult, dice_loss, hungarian_match, pair_cost_matrix


@dataclass
class GroundTruth:
    classes: torch.Tensor  # G (long)
    masks: torch.Tensor  # G x T float {0, 1}

    def __len__(self):
        return int(self.classes.shape[0])


def match_round(class_logits, mask_logits, gt: GroundTruth, weights=LossWeights()) -> MatchResult:
    if len(gt) == 0:
        return hungarian_match(torch.zeros(class_logits.shape[0], 0).numpy())
    with torch.no_grad():
        cost = pair_cost_matrix(class_logits, mask_logits, gt.classes, gt.masks.to(mask_logits.dtype), weights)
    return hungarian_match(cost.double().numpy())


def set_loss(class_logits, mask_logits, gt: GroundTruth, match: MatchResult, weights=LossWeights()):
    """Weighted terms for one round: (class, bce, dice) each already multiplied by its lambda."""
    nq, ncls = class_logits.shape
    no_object = ncls - 1
    target = torch.full((nq,), no_object, dtype=torch.long)
    qi = torch.as_tensor([p[0] for p in match.pairs], dtype=torch.long)
    gi = torch.as_tensor([p[1] for p in match.pairs], dtype=torch.long)
    if len(match.pairs):
        target[qi] = gt.classes[gi]
    class_w = torch.ones(ncls, dtype=class_logits.dtype)
    class_w[no_object] = weights.no_object
    ce = F.cross_entropy(class_logits, target, weight=class_w)
    if len(match.pairs):
        logits = mask_logits[qi]
        g = gt.masks[gi].to(mask_logits.dtype)
        bce = F.binary_cross_entropy_with_logits(logits, g, reduction="none").mean(1).mean()
        dice = dice_loss(torch.sigmoid(logits), g).mean()
    else:
        bce = dice = mask_logits.sum() * 0.0
    return weights.class_ * ce, weights.bce * bce, weights.dice * dice


def compute_losses(rounds, gt: GroundTruth, weights=LossWeights(), matches=None):
    """Sum of matched set losses over all refinement rounds.

    Returns (total, {"class", "bce", "dice"}, matches). Passing ``matches`` pins the
    assignment, which is what finite-difference checks need.
    """
    if matches is None:
        matches = [match_round(c, m, gt, weights) for c, m in rounds]
    terms = {"class": 0, "bce": 0, "dice": 0}
    for (c, m), match in zip(rounds, matches):
        lc, lb, ld = set_loss(c, m, gt, match, weights)
        terms["class"] = terms["class"] + lc
        terms["bce"] = terms["bce"] + lb
        terms["dice"] = terms["dice"] + ld
    total = terms["class"] + terms["bce"] + terms["dice"]
    return total, terms, matches
