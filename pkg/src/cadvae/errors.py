"""Exception hierarchy shared by every cadvae module."""


class CadVaeError(Exception):
    pass


class DimensionError(CadVaeError, ValueError):
    pass


class DomainError(CadVaeError, ValueError):
    pass


class NumericError(CadVaeError, ArithmeticError):
    pass


class ContractError(CadVaeError, ValueError):
    """An operation was called with inputs that break its stated contract."""


class UsageError(CadVaeError, RuntimeError):
    pass


class RangeError(CadVaeError, ValueError):
    pass


class LabelError(CadVaeError, ValueError):
    pass


class ConfigError(CadVaeError, ValueError):
    pass


class UndefinedGroupError(CadVaeError, ValueError):
    pass


class FormatError(CadVaeError, ValueError):
    """Malformed dataset or checkpoint file; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(CadVaeError, FloatingPointError):
    def __init__(self, term, value=None):
        super().__init__(f"non-finite value in {term!r}: {value!r}")
        self.term = term
        self.value = value
