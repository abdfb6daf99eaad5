"""Transformer-augmented visual saliency prediction in plain numpy."""

from .exceptions import (ConfigError, DegenerateInputError, DimensionError, FormatError,
                         GradCheckError, TapeError, TrainingError)
from .losses import DEFAULT_WEIGHTS, LossWeights, combined_loss
from .metrics import MetricReport, auc_judd, cc, evaluate_pair, kld, nss, sauc, sim
from .model import VARIANTS, ModelConfig, ModelParams, init_params, model_forward, predict
from .trainer import SaliencyDataset, TrainConfig, make_synthetic_dataset, train_loop
from .estimator import SaliencyRegressor, cross_validate

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateInputError", "DimensionError", "FormatError", "GradCheckError",
    "TapeError", "TrainingError", "DEFAULT_WEIGHTS", "LossWeights", "combined_loss",
    "MetricReport", "auc_judd", "cc", "evaluate_pair", "kld", "nss", "sauc", "sim",
    "VARIANTS", "ModelConfig", "ModelParams", "init_params", "model_forward", "predict",
    "SaliencyDataset", "TrainConfig", "make_synthetic_dataset", "train_loop",
    "SaliencyRegressor", "cross_validate",
]
