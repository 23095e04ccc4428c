"""Exception hierarchy shared by every module.

Each class carries the CLI exit status it maps to so the front end does not
need a lookup table.
"""


class FlexOffloadError(Exception):
    exit_code = 1


class InvalidParameterError(FlexOffloadError, ValueError):
    exit_code = 2


class UsageError(FlexOffloadError):
    exit_code = 2


class InsufficientBudgetError(FlexOffloadError):
    exit_code = 3


class StorageError(FlexOffloadError, OSError):
    exit_code = 4


class CapabilityError(FlexOffloadError):
    exit_code = 5


class CorruptionError(FlexOffloadError):
    exit_code = 6


class ModelUndefinedError(FlexOffloadError, ZeroDivisionError):
    """Raised when a throughput model has no finite answer (e.g. zero bandwidth)."""

    exit_code = 2
