"""coloc-retrieval - Co-localization learned from image-caption retrieval."""

__version__ = "0.1.0"

from .core.config_manager import ConfigManager
from .core.encoders import ColocModel, init_model
from .core.trainer import TrainConfig, train

__all__ = ["ConfigManager", "ColocModel", "TrainConfig", "init_model", "train"]
