"""Exception types shared across the package.

Every public operation raises one of these instead of letting bare
ValueError/KeyError bubble up, so the CLI can map failures to stable
exit codes and single-line diagnostics.
"""


class XDecError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputError(XDecError):
    """A caller supplied an argument that violates an operation's contract."""

    exit_code = 2


class FormatError(XDecError):
    """A file on disk is malformed: bad magic, truncation, checksum mismatch."""

    exit_code = 3


class TrainingError(XDecError):
    """Optimization failed, e.g. a loss became non-finite."""

    exit_code = 4
