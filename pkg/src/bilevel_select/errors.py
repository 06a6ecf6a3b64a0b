"""Exception types raised across the package."""


class BilevelSelectError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BilevelSelectError, ValueError):
    """Malformed arrays, token ids out of range, bad shapes."""


class InvalidConfigError(BilevelSelectError, ValueError):
    """A configuration value violates a constraint.

    ``key`` names the offending (dotted) configuration key when known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class TrainingDivergedError(BilevelSelectError, RuntimeError):
    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step


class RatioOverflowError(BilevelSelectError, OverflowError):
    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class ResourceLimitError(BilevelSelectError, RuntimeError):
    """An oracle was asked to enumerate more points than allowed."""
