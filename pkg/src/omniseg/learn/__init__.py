from .losses import GroundTruth, compute_losses, match_round, set_loss
from .matching import LossWeights, MatchResult, dice_loss, hungarian_match, pair_cost, pair_cost_matrix
from .optim import make_optimizer, optimizer_step
from .train import TrainConfig, frame_targets, make_batch, train_loop

__all__ = [
    "GroundTruth",
    "LossWeights",
    "MatchResult",
    "TrainConfig",
    "compute_losses",
    "dice_loss",
    "frame_targets",
    "hungarian_match",
    "make_batch",
    "make_optimizer",
    "match_round",
    "optimizer_step",
    "pair_cost",
    "pair_cost_matrix",
    "set_loss",
    "train_loop",
]
