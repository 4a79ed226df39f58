"""Exception and warning types shared across the toolkit.

Every toolkit error carries an ``exit_code`` so the CLI can map failures
to stable, scriptable process exit codes:

* 1 -- contract or data error
* 2 -- file parse error
* 3 -- lesion placement exhaustion
"""


class TumorkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ContractError(TumorkitError):
    """An argument violates a documented precondition."""


class DataError(TumorkitError):
    """Input is readable but semantically invalid (NaN, degenerate, ...)."""


class ParseError(TumorkitError):
    """A file could not be parsed; the message names the offending field."""

    exit_code = 2


class UnsupportedFormatError(ParseError):
    """A recognised but unsupported on-disk format or datatype."""


class TruncatedFileError(ParseError):
    """A file ends before the bytes its header promises; the message
    reports expected vs actual byte counts."""


class PlacementError(TumorkitError):
    """Lesion placement retries exhausted for a case."""

    exit_code = 3


class DegenerateInputWarning(UserWarning):
    """Emitted when an operation degrades gracefully on degenerate input."""
