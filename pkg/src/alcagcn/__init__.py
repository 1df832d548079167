"""One-shot skeleton action recognition with local comparing units and attention re-weighting."""
__version__ = "0.1.0"

from .config import RunConfig, load_config
from .dataset import Dataset, load_dataset, save_dataset
from .encoder import EncoderConfig
from .fewshot import TrainRunConfig, evaluate_oneshot, train
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .skeleton import SkeletonSequence, preprocess, read_skeleton_file
from .synthetic import generate_synthetic_dataset
from .topology import SkeletonGraph, ntu_graph

__all__ = [
    "Dataset",
    "EncoderConfig",
    "Model",
    "ModelConfig",
    "RunConfig",
    "SkeletonGraph",
    "SkeletonSequence",
    "TrainRunConfig",
    "evaluate_oneshot",
    "generate_synthetic_dataset",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "ntu_graph",
    "preprocess",
    "read_skeleton_file",
    "save_checkpoint",
    "save_dataset",
    "train",
]
