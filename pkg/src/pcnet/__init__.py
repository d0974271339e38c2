"""Pair-trained scene classifier with self and mutual channel attention, on a small numpy autodiff core."""

__version__ = "0.1.0"

from pcnet.config import TrainConfig, load_config
from pcnet.data import Dataset, generate_synthetic, load_folder_dataset, prepare_splits
from pcnet.model import PCNet
from pcnet.tensor import Tape, Tensor, no_grad

__all__ = [
    "Dataset", "PCNet", "Tape", "Tensor", "TrainConfig", "generate_synthetic", "load_config",
    "load_folder_dataset", "no_grad", "prepare_splits", "__version__",
]
