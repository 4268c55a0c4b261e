"""Multi-hop question answering over text and image sources with a
source-derived knowledge graph, built on a small numpy autodiff engine."""

from .config import ModelConfig, TrainConfig
from .data import Source, TrainingExample, World, read_dataset, write_dataset
from .model import HopQAModel, build_vocab

__all__ = [
    "HopQAModel",
    "ModelConfig",
    "Source",
    "TrainConfig",
    "TrainingExample",
    "World",
    "build_vocab",
    "read_dataset",
    "write_dataset",
]

__version__ = "0.1.0"
