"""Exception types shared across the package."""


class HrebError(Exception):
    """Base class for package errors."""


class ConfigError(HrebError):
    """Bad run configuration or malformed input data."""


class NumericsError(HrebError):
    """A computation produced NaN or infinity where finite values are required."""


class DegenerateRowError(NumericsError):
    """An attention row has no unmasked key, or normalization hit a non-positive sum."""


class DivergenceError(NumericsError):
    """Training loss became non-finite; the run cannot continue."""


class CheckpointError(HrebError):
    """Checkpoint file is malformed or from an incompatible format version."""


class VerificationError(HrebError):
    """A self-check (gradient, decoder, or scan equivalence) failed."""
