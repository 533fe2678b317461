"""Audio-visual segmentation with adapters on a frozen vision transformer."""

from .config import ModelConfig, TrainConfig
from .estimator import SAVESegmenter
from .model import SaveModel, build_model

__version__ = "0.1.0"
__all__ = ["ModelConfig", "TrainConfig", "SAVESegmenter", "SaveModel", "build_model"]
