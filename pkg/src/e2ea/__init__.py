"""Joint CTC/attention end-to-end speech recognition in numpy."""

from .config import RunConfig, load_config, parse_config
from .decode import BeamConfig, decode, decode_features
from .model import JointModel, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "BeamConfig",
    "JointModel",
    "ModelConfig",
    "RunConfig",
    "decode",
    "decode_features",
    "load_config",
    "parse_config",
]
