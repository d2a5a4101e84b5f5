"""Exception hierarchy shared by every dbf module."""


class DBFError(Exception):
    pass


class ShapeError(DBFError, ValueError):
    pass


class MaskError(DBFError, ValueError):
    """A softmax row had no open positions."""


class DegenerateInputError(DBFError, ValueError):
    """A vector was too close to zero to normalize."""


class NonFiniteError(DBFError, ArithmeticError):
    pass


class ContractError(DBFError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(DBFError, ValueError):
    pass


class SchemaError(DBFError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UndefinedStatisticError(DBFError, ValueError):
    pass
