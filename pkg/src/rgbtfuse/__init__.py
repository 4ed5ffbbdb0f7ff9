"""RGB-thermal semantic segmentation on a small numpy autograd engine."""
from .errors import (CheckpointError, ConfigError, DataError, FusionError, GraphError, NumericError,
                     ParseError, RGBTError, TrainingDiverged)
from .model import ModelConfig, RGBTSegmenter
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = ["CheckpointError", "ConfigError", "DataError", "FusionError", "GraphError", "ModelConfig",
           "NumericError", "Parameter", "ParseError", "RGBTError", "RGBTSegmenter", "Tensor",
           "TrainingDiverged", "backward", "no_grad"]
