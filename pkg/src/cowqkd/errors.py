"""Exception types shared across the package."""


class CowQkdError(Exception):
    """Base class for all package errors."""


class RangeError(CowQkdError, ValueError):
    """A field value does not fit its bit width or allowed range."""


class ModeMismatch(CowQkdError, ValueError):
    """A record variant was used with the wrong acquisition mode."""


class InvalidRecord(CowQkdError, ValueError):
    """A 32-bit word does not decode to any known record variant.

    ``position`` is the index of the offending word inside a stream, when known.
    """

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (record #{position})"
        super().__init__(message)
        self.position = position


class InvalidDivider(CowQkdError, ValueError):
    pass


class UnsortedInput(CowQkdError, ValueError):
    """An input stream is not nondecreasing in time.

    ``stream`` identifies the offending input (index into the list of inputs)
    and ``position`` the first record that goes backwards.
    """

    def __init__(self, message, stream=None, position=None):
        super().__init__(message)
        self.stream = stream
        self.position = position


class FormatError(CowQkdError, ValueError):
    """A record file is malformed. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)
        self.offset = offset


class InvalidParams(CowQkdError, ValueError):
    pass


class DomainError(CowQkdError, ValueError):
    pass


class ResolutionMismatch(CowQkdError, ValueError):
    pass


class EmptyHistogram(CowQkdError, ValueError):
    pass


class ConfigError(CowQkdError, ValueError):
    """Configuration problem, optionally tied to a line in the config file."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None and line is not None:
            where = f"{path}:{line}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.line = line
