class DynSubnetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DynSubnetError, ValueError):
    pass


class DataError(DynSubnetError, ValueError):
    pass


class FormatError(DataError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class NumericError(DynSubnetError, ArithmeticError):
    pass


class InvariantError(DynSubnetError, ValueError):
    pass


class TieSetError(InvariantError):
    def __init__(self, group, message):
        super().__init__(f"tie group {group!r}: {message}")
        self.group = group


class SizeError(DynSubnetError, ValueError):
    pass


class DependencyError(DynSubnetError, RuntimeError):
    def __init__(self, stage, missing):
        super().__init__(f"stage {stage!r} needs {missing}, which does not exist yet")
        self.stage = stage
        self.missing = missing
