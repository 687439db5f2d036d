"""Backdoor poisoning lab and input-gradient spectral defense."""
from .defense import NeutralizeConfig, detect_poison_classes, filter_poisoned, neutralize
from .nn import Network, TrainConfig, init_mlp, train
from .poisonlab import Dataset, PoisonSpec, make_synthetic_image_task, poison_dataset

__all__ = [
    "Dataset", "Network", "NeutralizeConfig", "PoisonSpec", "TrainConfig",
    "detect_poison_classes", "filter_poisoned", "init_mlp", "make_synthetic_image_task",
    "neutralize", "poison_dataset", "train",
]
__version__ = "0.1.0"
