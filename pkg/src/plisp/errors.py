"""Exception hierarchy shared by every plisp module."""


class LispError(Exception):
    """Base class for all errors raised by the language or the engines."""


class LispSyntaxError(LispError):
    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        if line is not None:
            message = f"{message} (line {line}, col {col})"
        super().__init__(message)


class UnboundSymbolError(LispError):
    pass


class NotAProcedureError(LispError):
    pass


class ArityError(LispError):
    pass


class TypeMismatchError(LispError):
    pass


class ShapeMismatchError(LispError):
    pass


class DomainError(LispError):
    pass


class InvalidParametersError(LispError):
    pass


class ObserveNonStochasticError(LispError):
    pass


class AllWeightsZeroError(LispError):
    pass


class InternalInvariantViolation(LispError):
    pass
