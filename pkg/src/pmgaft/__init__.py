"""Pre-trained-model-guided adversarial fine-tuning for two-tower zero-shot classifiers."""
from .attack import AttackConfig, PGDAttack, pgd_attack, project_linf
from .datasets import (ImageDataset, Split, SyntheticSpec, load_archive, load_dataset, render_prompt,
                       save_archive, save_dataset, synthesize)
from .errors import (AliasingError, AttackFailureError, ConfigError, ContractViolation, CorruptionError,
                     FormatError, PMGAFTError, ShapeError, TrainingAbort, ValidationError)
from .evalsuite import (EvalReport, evaluate_clean, evaluate_robust, strength_sweep, tradeoff_curve,
                        zero_shot_suite)
from .losses import LossBreakdown, LossSpec, decomposition_residual, total_loss
from .model import TwoTowerModel, build_toy_model, classify, predict_probs, similarity
from .snapshot import (ParameterSnapshot, interpolate, load_checkpoint, load_snapshot, relative_drift,
                       save_checkpoint, snapshot_parameters)
from .trainer import TrainConfig, TrainHistory, VisualPrompt, finetune, frozen_copy

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "PGDAttack", "pgd_attack", "project_linf",
    "ImageDataset", "Split", "SyntheticSpec", "load_archive", "load_dataset", "render_prompt",
    "save_archive", "save_dataset", "synthesize",
    "AliasingError", "AttackFailureError", "ConfigError", "ContractViolation", "CorruptionError",
    "FormatError", "PMGAFTError", "ShapeError", "TrainingAbort", "ValidationError",
    "EvalReport", "evaluate_clean", "evaluate_robust", "strength_sweep", "tradeoff_curve", "zero_shot_suite",
    "LossBreakdown", "LossSpec", "decomposition_residual", "total_loss",
    "TwoTowerModel", "build_toy_model", "classify", "predict_probs", "similarity",
    "ParameterSnapshot", "interpolate", "load_checkpoint", "load_snapshot", "relative_drift",
    "save_checkpoint", "snapshot_parameters",
    "TrainConfig", "TrainHistory", "VisualPrompt", "finetune", "frozen_copy",
]
