"""Toy mixture-of-experts with intra-layer specialization and cross-layer coupling regularizers."""

from .estimators import MoeLanguageModel
from .losses import LossWeights, coupling_loss, load_balance_loss, specialization_loss, total_loss, z_loss
from .moe import MoeConfig, MoeLayer, MoeModel, layer_forward, model_forward, route
from .trace import RoutingTrace

__all__ = [
    "LossWeights",
    "MoeConfig",
    "MoeLanguageModel",
    "MoeLayer",
    "MoeModel",
    "RoutingTrace",
    "coupling_loss",
    "layer_forward",
    "load_balance_loss",
    "model_forward",
    "route",
    "specialization_loss",
    "total_loss",
    "z_loss",
]

__version__ = "0.1.0"
