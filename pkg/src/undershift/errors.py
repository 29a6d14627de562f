"""Exception types shared across the package."""


class UndershiftError(Exception):
    """Base class for all errors raised by this package."""


class ColumnError(UndershiftError):
    """A named column is missing from an input file."""


class ParseError(UndershiftError):
    """A cell could not be parsed as a number."""


class EmptyInputError(UndershiftError):
    """An input file or array contained no usable rows."""


class InvalidConfigError(UndershiftError):
    """A configuration value is outside its allowed range."""


class InvalidFoldError(UndershiftError):
    """A cross-validation fold request cannot be satisfied."""


class DegenerateFoldError(UndershiftError):
    """A CV fold contains a single response class under logistic loss."""


class DegenerateResponseError(UndershiftError):
    """The regression response is constant or otherwise unusable."""


class DegenerateBinsError(UndershiftError):
    """A binning request produced empty or zero-width bins."""


class OutOfSupportError(UndershiftError):
    """A treatment value lies outside the binned support."""


class PositivityError(UndershiftError):
    """Density ratios indicate a practical positivity violation."""


class NumericError(UndershiftError):
    """Non-finite values encountered where finite numbers are required."""


class ShapeError(UndershiftError):
    """Array dimensions do not match the fitted object."""


class TiltFailureError(UndershiftError):
    """The targeting step failed to solve its score equation."""
