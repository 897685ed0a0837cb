"""Collaborative-filtering losses, KL-ball robustness tools, and an MF trainer."""

from .config import (BslForm, ExperimentConfig, LossKind, LossSpec, NegSampler,
                     SamplingMode, TrainConfig)
from .data import Dataset, load_dataset, popularity_groups, save_dataset
from .dro import (WorstCaseDistribution, dual_value, estimate_eta, kl_ball_sup,
                  taylor_negative_part, tau_star, worst_case_weights)
from .evaluate import EvalReport, evaluate, noise_sweep
from .losses import (LossResult, ScoreBatch, bce_loss, bpr_loss, bsl_loss,
                     mse_loss, softmax_loss, softmax_loss_no_variance)
from .model import (AdamState, EmbeddingTable, cosine_score, init_embeddings,
                    load_checkpoint, save_checkpoint, score_all_items, train)
from .sampling import (SamplerState, contaminate_positives, in_batch_negatives,
                       sample_negatives)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BslForm", "Dataset", "EmbeddingTable", "EvalReport",
    "ExperimentConfig", "LossKind", "LossResult", "LossSpec", "NegSampler",
    "SamplerState", "SamplingMode", "ScoreBatch", "TrainConfig",
    "WorstCaseDistribution", "bce_loss", "bpr_loss", "bsl_loss",
    "contaminate_positives", "cosine_score", "dual_value", "estimate_eta",
    "evaluate", "in_batch_negatives", "init_embeddings", "kl_ball_sup",
    "load_checkpoint", "load_dataset", "mse_loss", "noise_sweep",
    "popularity_groups", "sample_negatives", "save_checkpoint", "save_dataset",
    "score_all_items", "softmax_loss", "softmax_loss_no_variance",
    "taylor_negative_part", "tau_star", "train", "worst_case_weights",
]
