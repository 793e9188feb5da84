"""Federated averaging where each client trains a random subset of layer units."""
__version__ = "0.1.0"

from .errors import (AggregationError, ConfigError, DescriptorError, FedFreezeError, MaskError,
                     ModelFormatError, NonFiniteError, QuorumError, ShapeMismatchError,
                     TransportError)
from .state import ModelState

__all__ = [
    "__version__", "ModelState", "FedFreezeError", "ShapeMismatchError", "MaskError",
    "ModelFormatError", "DescriptorError", "AggregationError", "ConfigError",
    "NonFiniteError", "QuorumError", "TransportError",
]
