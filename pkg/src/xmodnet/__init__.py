"""Few-shot classification with Matching Networks and Cross-Modulation Networks."""

from .data import DatasetSplit, Episode, sample_episode, synthetic_dataset, synthetic_splits
from .model import Network, classify_episode, init_network, load_checkpoint, save_checkpoint
from .training import EvalReport, TrainConfig, evaluate, train

__all__ = [
    "DatasetSplit",
    "Episode",
    "EvalReport",
    "Network",
    "TrainConfig",
    "classify_episode",
    "evaluate",
    "init_network",
    "load_checkpoint",
    "sample_episode",
    "save_checkpoint",
    "synthetic_dataset",
    "synthetic_splits",
    "train",
]

__version__ = "0.1.0"
