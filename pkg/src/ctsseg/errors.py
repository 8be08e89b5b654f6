"""Exception taxonomy shared across the package.

Every error raised on purpose derives from CtssegError so callers (and the
CLI) can catch one base class and turn it into a clean diagnostic.
"""


class CtssegError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CtssegError, ValueError):
    """Array or grid shapes violate an operation's contract."""


class UsageError(CtssegError, ValueError):
    """An API was called in a way its contract forbids."""


class InputError(CtssegError, ValueError):
    """Input values lie outside the documented domain."""


class ConfigError(CtssegError, ValueError):
    """Bad configuration key, value, or dataset layout."""


class FormatError(CtssegError, ValueError):
    """Malformed binary file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
