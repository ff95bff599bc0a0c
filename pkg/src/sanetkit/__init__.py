"""Scale-aware semantic segmentation for multi-resolution aerial imagery, on a small numpy autodiff engine."""

from .backbone import Backbone, BackboneConfig
from .dcfpn import DCFPN
from .errors import (CheckpointError, ConfigError, DataError, DimensionError, GraphStateError, NumericError,
                     PipelineError, SanetError)
from .metrics import ConfusionMatrix, Scores, macro_scores
from .model import ModelConfig, SaNet, load_checkpoint, save_checkpoint
from .sfr import SFR
from .tensor import Parameter, Tensor, backward, no_grad
from .train import AdamW, TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Backbone", "BackboneConfig", "CheckpointError", "ConfigError", "ConfusionMatrix", "DCFPN",
    "DataError", "DimensionError", "GraphStateError", "ModelConfig", "NumericError", "Parameter",
    "PipelineError", "SFR", "SaNet", "SanetError", "Scores", "Tensor", "TrainConfig", "backward", "fit",
    "load_checkpoint", "macro_scores", "no_grad", "save_checkpoint",
]
