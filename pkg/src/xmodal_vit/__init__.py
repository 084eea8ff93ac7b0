"""Cross-modal WL/NBI vision transformer for colorectal polyp classification.

Training uses paired white-light and narrow-band images; inference needs
white-light images only.
"""

from .alignment import LossBreakdown, ResponseMap, cga_loss, local_loss, spatial_attention, total_loss
from .data import (FoldSplit, PairedSample, SyntheticGenConfig, generate_synthetic, load_manifest, subject_kfold,
                   write_dataset)
from .estimator import CrossModalViTClassifier
from .experiment import ExperimentReport, run_experiment
from .tensor import Tensor
from .training import EpochReport, NumericalError, TrainConfig, evaluate
from .vit import ModelConfig, count_params, forward, init_params, strip_sam

__version__ = "0.1.0"

__all__ = [
    "CrossModalViTClassifier", "EpochReport", "ExperimentReport", "FoldSplit", "LossBreakdown", "ModelConfig",
    "NumericalError", "PairedSample", "ResponseMap", "SyntheticGenConfig", "Tensor", "TrainConfig", "cga_loss",
    "count_params", "evaluate", "forward", "generate_synthetic", "init_params", "load_manifest", "local_loss",
    "run_experiment", "spatial_attention", "strip_sam", "subject_kfold", "total_loss", "write_dataset",
]
