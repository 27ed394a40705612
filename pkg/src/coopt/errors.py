"""Exception types shared by the cache, attention, and engine layers."""


class ShapeError(ValueError):
    """An array argument disagrees with its declared shape."""


class ConfigError(ValueError):
    """A configuration is inconsistent or unsupported."""


class CapacityError(RuntimeError):
    """The block pool cannot satisfy an allocation request."""


class IntegrityError(RuntimeError):
    """Cache state violates a structural invariant (bad slot, double free,
    or a corrupt quantized payload)."""
