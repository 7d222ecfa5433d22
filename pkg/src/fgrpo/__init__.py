"""Constrained group-relative policy optimization with faithfulness constraints."""

from .advantage import fgrpo_advantage, group_normalize, whiten_batch
from .core import (
    BBox,
    LagrangeState,
    Mode,
    RewardVector,
    RolloutGroup,
    RolloutRecord,
    SourceTag,
    StructuredResponse,
    TrainConfig,
    seeded_rng,
)
from .dual import batch_constraint_score, dual_update, step_duals
from .estimator import FaithfulGRPO
from .geometry import ciou, hungarian_match, iou, spatial_grounding_reward
from .mcts import Chain, ChainKind, SearchParams, linearize, puct_score, run_search
from .parse import parse_response, split_sentences
from .policy import PolicyParams, clipped_surrogate_loss
from .rewards import Judges, cohen_kappa, compute_metrics, inconsistency_rate, score_response
from .synthenv import EnvConfig, SynthEnv, SynthTask
from .trainer import evaluate, train, train_step

__version__ = "0.1.0"

__all__ = [
    "batch_constraint_score",
    "BBox",
    "Chain",
    "ChainKind",
    "ciou",
    "clipped_surrogate_loss",
    "cohen_kappa",
    "compute_metrics",
    "dual_update",
    "EnvConfig",
    "evaluate",
    "FaithfulGRPO",
    "fgrpo_advantage",
    "group_normalize",
    "hungarian_match",
    "inconsistency_rate",
    "iou",
    "Judges",
    "LagrangeState",
    "linearize",
    "Mode",
    "parse_response",
    "PolicyParams",
    "puct_score",
    "RewardVector",
    "RolloutGroup",
    "RolloutRecord",
    "run_search",
    "score_response",
    "SearchParams",
    "seeded_rng",
    "SourceTag",
    "spatial_grounding_reward",
    "split_sentences",
    "step_duals",
    "StructuredResponse",
    "SynthEnv",
    "SynthTask",
    "train",
    "train_step",
    "TrainConfig",
    "whiten_batch",
]
