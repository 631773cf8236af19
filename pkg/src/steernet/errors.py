"""Exception types shared across steernet."""


class ConfigError(ValueError):
    """Invalid configuration value (bad learning rate, eps, fraction, unknown key...)."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """NaN/Inf encountered, or a value that cannot be normalized."""


class LengthError(ValueError):
    """A token sequence is empty, too short, or longer than the model allows."""


class DataError(ValueError):
    """Malformed or degenerate data (empty sets, zero-norm targets)."""


class TapeConsumedError(RuntimeError):
    """backward() called on a graph whose tape was already replayed."""


class TrainingError(RuntimeError):
    """Training diverged. ``checkpoint`` holds the last finite parameters."""

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


class CapabilityError(ValueError):
    """The requested operation is not supported by this model variant."""


class FitError(RuntimeError):
    """Curve fit failed to converge; ``best`` carries the best-so-far parameters."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class RankError(ValueError):
    """Input is rank-deficient for the requested decomposition."""


class ChecksumError(ValueError):
    """Archive contents do not match the stored checksum."""


class FormatError(ValueError):
    """Archive has a bad magic string or an unsupported format version."""
