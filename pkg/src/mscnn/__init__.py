"""Multi-scale multi-column CNN with level-wise feature fusion, built on a small numpy autodiff core."""

from .model import VARIANTS, FeatureBundle, Network, NetworkConfig, build_network, extract_descriptor
from .tensor import Tape, Tensor, backward, no_grad
from .training import TrainConfig, train

__all__ = [
    "VARIANTS",
    "FeatureBundle",
    "Network",
    "NetworkConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_network",
    "extract_descriptor",
    "no_grad",
    "train",
]
__version__ = "0.1.0"
