"""Traffic-flow forecasting with a disentangle gate, time enhancement and adaptive graph convolution."""

from .errors import BoundsError, ConfigError, ContractError, DataFormatError, DimensionError, NumericalError, TeddnError
from .model import ModelConfig, TeddnModel, build, load_checkpoint, save_checkpoint, variant
from .training import TrainConfig, evaluate, metrics, train

__version__ = "0.1.0"

__all__ = [
    "BoundsError", "ConfigError", "ContractError", "DataFormatError", "DimensionError", "NumericalError",
    "TeddnError", "ModelConfig", "TeddnModel", "TrainConfig", "build", "evaluate", "load_checkpoint", "metrics",
    "save_checkpoint", "train", "variant",
]
