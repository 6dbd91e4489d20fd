"""Continuous-time masked-diffusion recommender over interaction sequences."""

from .collab import EmbeddingBundle, load_embeddings, save_embeddings, train_fallback_mf
from .config import RunConfig
from .corpus import (
    MASK,
    PAD,
    InteractionLog,
    PopularityTable,
    SplitBundle,
    UserSequence,
    build_sequences,
    load_interactions,
    popularity,
    popularity_deviation,
    split_chronological,
)
from .denoiser import ConsistencyDenoiser, consistency_apply, load_checkpoint, save_checkpoint
from .estimator import DiffusionRecommender
from .metrics import MetricsReport, evaluate_model, evaluate_scorer, ndcg_at_k, recall_at_k
from .sampler import Recommendation, SamplingPlan, recommend, sample, trace_forward
from .schedule import (
    DiffusionState,
    NoiseSchedule,
    cumulative_beta,
    forward_sample,
    mask_probability,
    pair_one_step_recovery,
    pair_pseudo_euler,
    transition_kernel_row,
)
from .training import (
    LossBreakdown,
    TrainConfig,
    TrainResult,
    build_training_data,
    consistency_loss,
    contrastive_loss,
    diffusion_loss,
    ema_update,
    joint_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "MASK",
    "PAD",
    "ConsistencyDenoiser",
    "DiffusionRecommender",
    "DiffusionState",
    "EmbeddingBundle",
    "InteractionLog",
    "LossBreakdown",
    "MetricsReport",
    "NoiseSchedule",
    "PopularityTable",
    "Recommendation",
    "RunConfig",
    "SamplingPlan",
    "SplitBundle",
    "TrainConfig",
    "TrainResult",
    "UserSequence",
    "build_sequences",
    "build_training_data",
    "consistency_apply",
    "consistency_loss",
    "contrastive_loss",
    "cumulative_beta",
    "diffusion_loss",
    "ema_update",
    "evaluate_model",
    "evaluate_scorer",
    "forward_sample",
    "joint_loss",
    "load_checkpoint",
    "load_embeddings",
    "load_interactions",
    "mask_probability",
    "ndcg_at_k",
    "pair_one_step_recovery",
    "pair_pseudo_euler",
    "popularity",
    "popularity_deviation",
    "recall_at_k",
    "recommend",
    "sample",
    "save_checkpoint",
    "save_embeddings",
    "split_chronological",
    "train",
    "train_fallback_mf",
    "trace_forward",
    "transition_kernel_row",
]
