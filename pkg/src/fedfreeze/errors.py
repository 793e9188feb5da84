"""Exception hierarchy shared by all modules."""


class FedFreezeError(Exception):
    """Base class for library errors."""


class ShapeMismatchError(FedFreezeError, ValueError):
    pass


class NonFiniteError(FedFreezeError, FloatingPointError):
    """A tensor, loss or update contains NaN or Inf."""


class MaskError(FedFreezeError, ValueError):
    """A freeze mask references an ineligible or unknown layer unit."""


class ModelFormatError(FedFreezeError, ValueError):
    """Malformed, truncated or corrupted serialized model."""


class DescriptorError(FedFreezeError, ValueError):
    """Architecture descriptor is malformed or dimensionally inconsistent."""


class AggregationError(FedFreezeError, ValueError):
    pass


class QuorumError(FedFreezeError, RuntimeError):
    """Fewer client updates arrived than the round quorum requires."""


class TransportError(FedFreezeError, ConnectionError):
    pass


class ConfigError(FedFreezeError, ValueError):
    pass
