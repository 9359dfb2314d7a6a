"""U-DFA: frozen-ViT/UNet medical image segmentation with a spatial
pattern adapter and local-global fusion adapters.
"""

from .config import ConfigError, ModelConfig, TrainConfig, default_acdc_config, default_synapse_config, load_config
from .model import UDFA, build_model

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainConfig",
    "UDFA",
    "build_model",
    "default_acdc_config",
    "default_synapse_config",
    "load_config",
]

__version__ = "0.1.0"
