"""Point-cloud completion by snowflake point deconvolution, in plain numpy."""

from .config import EncoderConfig, LossWeights, ModelConfig, RunConfig, SeedConfig, TrainConfig
from .model import Prediction, SnowflakeNet
from .ndtensor import Tensor

__all__ = [
    "EncoderConfig",
    "LossWeights",
    "ModelConfig",
    "Prediction",
    "RunConfig",
    "SeedConfig",
    "SnowflakeNet",
    "Tensor",
    "TrainConfig",
]
