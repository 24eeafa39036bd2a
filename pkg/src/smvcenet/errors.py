"""Exception hierarchy shared across the package.

``UserError`` subclasses are problems with inputs (bad config, missing
files, out-of-range arguments). ``InvariantViolation`` subclasses signal a
broken internal contract and should never be caught silently.
"""


class SMVCENetError(Exception):
    """Base class for every error raised by this package."""


class UserError(SMVCENetError):
    pass


class ConfigError(UserError, ValueError):
    """Invalid configuration: unknown key, bad type, or out-of-range value."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class RangeError(UserError, IndexError):
    pass


class ShapeError(UserError, ValueError):
    pass


class ExhaustionError(UserError, LookupError):
    """No image in the dataset carries any class of the requested split."""


class LoadError(UserError, OSError):
    """Missing, truncated, or mismatched weights / checkpoint file."""


class InvariantViolation(SMVCENetError, AssertionError):
    pass


class ContractError(InvariantViolation):
    pass


class TrainingDiverged(InvariantViolation, FloatingPointError):
    """Non-finite loss. ``batch_ids`` names the offending episodes."""

    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
