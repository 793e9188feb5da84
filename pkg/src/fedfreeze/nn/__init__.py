"""Minimal sequential neural network engine with per-unit freeze masks."""
from .layers import LAYER_TYPES, Layer, make_layer
from .network import Network, Unit, backward, forward
from .optim import SGD, Adam, Optimizer, make_optimizer, optimizer_step

__all__ = [
    "LAYER_TYPES", "Layer", "make_layer", "Network", "Unit", "forward", "backward",
    "Optimizer", "SGD", "Adam", "make_optimizer", "optimizer_step",
]
