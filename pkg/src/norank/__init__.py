"""Rank-free tensor embeddings by regularized triplet learning, with CP/Tucker/PCA/t-SNE baselines."""

__version__ = "0.1.0"

from .data import LabeledDataset, generate_crystals, generate_galaxies, load_dataset
from .decomp import cp_als, tucker_hooi
from .encoder import embed, init_params
from .losses import LossConfig
from .metrics import MetricsReport, evaluate
from .trainer import TrainConfig, train

__all__ = [
    "LabeledDataset", "LossConfig", "MetricsReport", "TrainConfig", "cp_als", "embed",
    "evaluate", "generate_crystals", "generate_galaxies", "init_params", "load_dataset",
    "train", "tucker_hooi",
]
