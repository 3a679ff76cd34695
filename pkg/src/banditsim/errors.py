"""Exception types shared across the package."""


class BanditSimError(Exception):
    """Base class for all banditsim errors."""


class ConfigurationError(BanditSimError):
    """A config object violates its invariants."""


class ShapeError(BanditSimError):
    """Array dimensions do not match the network or catalog layout."""


class InputError(BanditSimError):
    """Non-finite or otherwise unusable input data."""


class UsageError(BanditSimError):
    """An operation was called with arguments outside its contract."""


class NumericError(BanditSimError):
    """Training or evaluation produced non-finite numbers."""


class IntegrityError(BanditSimError):
    """A file or dataset fails structural validation."""


class VersionMismatchError(IntegrityError):
    """A checkpoint was written by an incompatible format version."""


class ParseError(IntegrityError):
    """A persisted record could not be decoded."""


class EnvironmentExhausted(BanditSimError):
    """Not enough eligible candidates remain to fill a slate."""


class ContractViolation(BanditSimError):
    """A caller broke a precondition the environment enforces."""


class UndefinedMetricError(BanditSimError):
    """The requested metric is undefined for the given labels."""


class CompatibilityError(BanditSimError):
    """Checkpoint and catalog dimensions do not line up."""
