"""Exception hierarchy shared by every module of the package."""


class MCLError(Exception):
    """Base class for all errors raised by mcl_forge."""


class ShapeError(MCLError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(MCLError, ValueError):
    """A value lies outside the domain of the operation (e.g. log of a non-positive number)."""


class ContractError(MCLError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(MCLError, ValueError):
    """Invalid configuration or hyperparameter."""


class ParseError(MCLError, ValueError):
    """Malformed input file.

    ``offset`` is a byte offset for binary formats, ``line`` a 1-based line
    number for text formats.
    """

    def __init__(self, message, offset=None, line=None):
        where = ""
        if offset is not None:
            where = f" (at byte offset {offset})"
        elif line is not None:
            where = f" (at line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line
