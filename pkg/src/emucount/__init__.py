"""Bimodal crowd counting via modal emulation, on a from-scratch autodiff engine."""

from .autodiff import Tensor
from .model import CrowdCounter
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = ["Tensor", "CrowdCounter", "TrainConfig", "__version__"]
