"""Exception types shared across the package."""


class SkipAtError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(SkipAtError):
    """Operand dimensions are incompatible with an operation's contract."""


class ConfigError(SkipAtError):
    """A model or training configuration violates its invariants."""


class CheckpointError(SkipAtError):
    """A checkpoint or tensor file is malformed, truncated, or corrupt."""
