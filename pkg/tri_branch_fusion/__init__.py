"""Tri-branch Neural Fusion.

A Python package to train image/tabular classifiers with separate image,
tabular and fusion outputs, handle inconsistent labels between modalities,
ensemble the branches at inference and explain their decisions.
"""

__version__ = "0.1.0"
__author__ = "Your Name"
__email__ = "your.email@example.com"

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, load_run_config
from .csv_writer import ReportWriter
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    TnfError,
    ValidationError,
)
from .fusion import FusionKind
from .inference import Predictor, ensemble_predict
from .models import BranchLikelihoods, LabelStrategy, LossWeights
from .network import ModelConfig, TnfModel
from .synth import SynthConfig, SyntheticGenerator
from .tensor import Tensor
from .training import TrainConfig, Trainer

__all__ = [
    "BranchLikelihoods",
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "FusionKind",
    "LabelStrategy",
    "LossWeights",
    "ModelConfig",
    "Predictor",
    "ReportWriter",
    "RunConfig",
    "SynthConfig",
    "SyntheticGenerator",
    "Tensor",
    "TnfError",
    "TnfModel",
    "TrainConfig",
    "Trainer",
    "ValidationError",
    "ensemble_predict",
    "load_checkpoint",
    "load_run_config",
    "restore_model",
    "save_checkpoint",
]
