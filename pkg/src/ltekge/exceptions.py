"""Exception hierarchy shared by every module."""


class LTEKGEError(Exception):
    """Base class for all package errors."""


class ConfigError(LTEKGEError, ValueError):
    """Invalid or contradictory configuration."""


class DataError(LTEKGEError):
    """Problems with dataset files or their contents."""


class ParseError(DataError, ValueError):
    def __init__(self, message, line_number=None, path=None):
        self.line_number = line_number
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line_number is not None:
            where += f"{line_number}: "
        elif where:
            where += " "
        super().__init__(where + message)


class VocabularyError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ShapeError(LTEKGEError, ValueError):
    """Tensor dimensions do not agree."""


class DegenerateBatchError(LTEKGEError, ValueError):
    """Batch statistics requested over a batch that cannot provide them."""


class ContractError(LTEKGEError, RuntimeError):
    """A caller violated a documented precondition."""


class ParameterError(LTEKGEError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericError(LTEKGEError, ArithmeticError):
    """Non-finite values or out-of-domain arguments."""


class SingularityError(NumericError):
    pass


class DomainError(NumericError):
    pass


class CheckpointError(LTEKGEError, IOError):
    pass
