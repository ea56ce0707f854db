"""Joint depth estimation and semantic segmentation on a small numpy autograd."""
from .data import GeneratorConfig, generate_dataset, read_dataset, write_dataset
from .metrics import MetricsReport
from .model import CINetParams, ModelConfig, forward, load_checkpoint, save_checkpoint
from .train import StageConfig, TrainConfig, three_stage_train

__version__ = "0.1.0"

__all__ = [
    "CINetParams", "GeneratorConfig", "MetricsReport", "ModelConfig", "StageConfig",
    "TrainConfig", "forward", "generate_dataset", "load_checkpoint", "read_dataset",
    "save_checkpoint", "three_stage_train", "write_dataset",
]
