"""Ordinal preference alignment from MoE router scores, at desk scale."""

from .autodiff import NumericError, Tensor, backward, finite_diff_check, no_grad
from .grouping import GroupingStrategy, LayerScope, TierGroupAssignment, assign_groups, default_block_positions, \
    resolve_layer_scope
from .losses import LossBreakdown, RewardSchedule, compute_advantages, total_loss
from .model import ModelConfig, multi_tier_forward
from .training import OptimConfig, TrainState, evaluate, train_step

__version__ = "0.1.0"

__all__ = [
    "GroupingStrategy", "LayerScope", "LossBreakdown", "ModelConfig", "NumericError", "OptimConfig",
    "RewardSchedule", "Tensor", "TierGroupAssignment", "TrainState", "assign_groups", "backward",
    "compute_advantages", "default_block_positions", "evaluate", "finite_diff_check", "multi_tier_forward",
    "no_grad", "resolve_layer_scope", "total_loss", "train_step",
]
