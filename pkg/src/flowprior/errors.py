"""Exception types shared across the package."""


class FlowPriorError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FlowPriorError):
    """An array argument has an incompatible shape or dimension."""


class NumericError(FlowPriorError):
    """A computation produced a non-finite value."""


class FormatError(FlowPriorError):
    """A serialized file is malformed (bad magic, version, or truncation)."""


class DatasetError(FlowPriorError):
    """A dataset violates a structural invariant."""


class SamplingError(FlowPriorError):
    """Batch or latent sampling cannot satisfy its preconditions."""


class InitializationError(FlowPriorError):
    """Model statistics cannot be initialized from the given data."""


class DegenerateEmbeddingError(FlowPriorError):
    """A zero-norm embedding was passed to a similarity computation."""


class ConfigError(FlowPriorError):
    """A run configuration is invalid or contains unknown keys."""
