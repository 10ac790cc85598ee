"""Exception types raised across the package.

Each maps to a distinct nonzero exit code in the CLI (see cli.EXIT_CODES).
"""


class DimensionError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An input violates an operation's contract (non-scalar loss, bad one-hot, empty batch...)."""


class LabelError(ValueError):
    """A class label lies outside the valid range."""


class BuildError(ValueError):
    """Network layer specs are mutually inconsistent."""


class StateError(RuntimeError):
    """An operation was called on an object in the wrong state (e.g. untrained model)."""


class DataIOError(IOError):
    """A dataset file is missing, unreadable, or malformed."""


class DegenerateDataError(ValueError):
    """Training data is unusable (e.g. a single-class training set)."""
