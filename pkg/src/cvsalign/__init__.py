"""Multi-label prompt-contrastive alignment over precomputed embeddings."""

__version__ = "0.1.0"

from .alignment import AdapterModel, CriterionBatch, SimilarityBatch, total_loss
from .datamodel import Dataset, FeatureRecord, load_dataset, save_dataset, split_view
from .inference import StrategyScores, infer_zero_shot, score_records
from .metrics import EvalReport, average_precision, evaluate
from .numerics import DenseMatrix, GradTape, finite_diff_check
from .prompts import MultiClassBank, PromptBank, load_prompt_bank, load_subset_bank
from .synth import SynthConfig, generate, null_ap_distribution
from .training import Checkpoint, TrainConfig, train

__all__ = [
    "AdapterModel",
    "Checkpoint",
    "CriterionBatch",
    "Dataset",
    "DenseMatrix",
    "EvalReport",
    "FeatureRecord",
    "GradTape",
    "MultiClassBank",
    "PromptBank",
    "SimilarityBatch",
    "StrategyScores",
    "SynthConfig",
    "TrainConfig",
    "average_precision",
    "evaluate",
    "finite_diff_check",
    "generate",
    "infer_zero_shot",
    "load_dataset",
    "load_prompt_bank",
    "load_subset_bank",
    "null_ap_distribution",
    "save_dataset",
    "score_records",
    "split_view",
    "total_loss",
    "train",
]
