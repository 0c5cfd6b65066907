"""Exception hierarchy shared by every module."""


class BgSplitError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BgSplitError, ValueError):
    """Non-finite values, wrong shapes or out-of-range arguments."""


class InvalidLabelError(InvalidInputError):
    pass


class ConfigurationError(BgSplitError, ValueError):
    """Inconsistent settings detected before any work is done."""


class IngestionError(BgSplitError, ValueError):
    """A file on disk does not match the manifest it is joined against."""


class NumericalDivergenceError(BgSplitError, FloatingPointError):
    pass


class UndefinedMetricError(BgSplitError, ValueError):
    """A metric was requested for a class with no positives."""
