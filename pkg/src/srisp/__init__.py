"""srisp: self-supervised RGB-to-RAW conversion with a dynamically
parameterized invertible ISP pipeline."""

__version__ = "0.1.0"

from .blocks import PipelineParams, pipeline_forward, pipeline_reverse
from .model import Model, ModelConfig
from .selector import Selection, select_all
from .trainer import TrainConfig, train

__all__ = [
    "Model",
    "ModelConfig",
    "PipelineParams",
    "Selection",
    "TrainConfig",
    "pipeline_forward",
    "pipeline_reverse",
    "select_all",
    "train",
    "__version__",
]
