"""Dual-predictor attribute-attention head for zero-shot learning over
precomputed region features."""

from .data import (
    ClassSplit,
    FeatureDataset,
    FeatureRecord,
    SemanticMatrix,
    SynthSpec,
    ZSLData,
    generate_synthetic,
    load_semantic_matrix,
    read_feature_file,
    validate_split,
    write_feature_file,
)
from .estimator import DFANClassifier
from .evaluation import EvalReport, evaluate, harmonic_mean, per_class_top1, run_ablation, sweep
from .inference import CombineConfig, class_scores, czsl_predict, gzsl_predict
from .model import DfanParams, load_checkpoint, save_checkpoint
from .optim import Adam
from .tensor import Tensor
from .training import TrainConfig, train

__all__ = [
    "Adam",
    "ClassSplit",
    "CombineConfig",
    "DFANClassifier",
    "DfanParams",
    "EvalReport",
    "FeatureDataset",
    "FeatureRecord",
    "SemanticMatrix",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "ZSLData",
    "class_scores",
    "czsl_predict",
    "evaluate",
    "generate_synthetic",
    "gzsl_predict",
    "harmonic_mean",
    "load_checkpoint",
    "load_semantic_matrix",
    "per_class_top1",
    "read_feature_file",
    "run_ablation",
    "save_checkpoint",
    "sweep",
    "train",
    "validate_split",
    "write_feature_file",
]
