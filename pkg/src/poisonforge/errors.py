"""Exception types shared across the package."""


class PoisonForgeError(Exception):
    """Base class for package errors."""


class FormatError(PoisonForgeError):
    """A container or dataset file is malformed."""


class IntegrityError(PoisonForgeError):
    """Stored data contradicts its own metadata (e.g. a budget violation)."""


class TransformError(PoisonForgeError):
    """An image transform (codec) failed."""


class StateError(PoisonForgeError):
    """An operation was called on an object in the wrong state."""


class UnsupportedOperationError(PoisonForgeError):
    """The requested computation is not supported (e.g. non-differentiable)."""


class NumericError(PoisonForgeError):
    """A numerically degenerate input (zero-norm row, non-finite value)."""


class GeneratorQualityError(PoisonForgeError):
    """A poison generator's surrogate did not reach the required quality."""


class TrainingError(PoisonForgeError):
    """Training diverged. ``step`` holds the global step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(PoisonForgeError):
    """Invalid run configuration. ``key`` names the offending key."""

    def __init__(self, message, key=None, module=None):
        super().__init__(message)
        self.key = key
        self.module = module
