"""Exception types raised across the package."""


class HwsiError(Exception):
    """Base class for all package errors."""


class DimensionError(HwsiError, ValueError):
    """A primitive received operands of incompatible shape."""

    def __init__(self, op, shapes, detail=""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(HwsiError, ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(HwsiError, ArithmeticError):
    """A NaN or Inf was produced where finite values are required."""


class FormatError(HwsiError, ValueError):
    """A file on disk is missing, truncated or malformed."""

    def __init__(self, message, path=None, offset=None):
        self.path = None if path is None else str(path)
        self.offset = offset
        where = ""
        if path is not None:
            where = f" [{path}" + (f" @ byte {offset}" if offset is not None else "") + "]"
        super().__init__(message + where)


class CapacityError(HwsiError, RuntimeError):
    """Rejection sampling could not satisfy the separation constraint."""


class VocabularyError(HwsiError, KeyError):
    """A token id is outside the text vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown token"


class ConfigError(HwsiError, ValueError):
    """A configuration key is unknown or violates its constraint."""
